"""Reduced multiscale system, backward Euler time stepping and the fine reference.

Both problems have the algebraic form

    A v - B p = 0,        M dp/dt + B^T v = f

and are advanced with backward Euler, f evaluated at t_{n+1}.  Velocity is
eliminated through the pressure Schur complement ``M/tau + B^T A^+ B``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .cem import CemBasis, NumericalError
from .fields import SourceSpec
from .grid import ConfigurationError, FineGrid
from .rt0 import assemble_divergence, assemble_pressure_mass, assemble_velocity_mass, cell_load
from .spectral import SpectralBasis

STEP_TOL = 1e-10
# eigenvalues of the reduced velocity Gram matrix below this fraction of the largest are dropped
GRAM_RTOL = 1e-12


@dataclass(frozen=True)
class FineOperators:
    fine: FineGrid
    A: sp.csr_matrix
    B: sp.csr_matrix
    M: sp.csr_matrix  # rho-weighted cell mass

    @classmethod
    def build(cls, fine: FineGrid, kappa, rho=1.0) -> "FineOperators":
        return cls(
            fine,
            assemble_velocity_mass(fine, kappa),
            assemble_divergence(fine),
            assemble_pressure_mass(fine, rho),
        )


@dataclass(frozen=True)
class ReducedSystem:
    """Coarse matrices for A v - B p = 0, M p' + B^T v = f."""

    A: np.ndarray
    B: np.ndarray
    M: np.ndarray
    velocity_basis: sp.csc_matrix  # (n_edges, S)
    pressure_basis: sp.csc_matrix  # (n_cells, M)
    s_weights: np.ndarray
    fine: FineGrid

    @property
    def n_velocity(self) -> int:
        return self.A.shape[0]

    @property
    def n_pressure(self) -> int:
        return self.M.shape[0]

    def load(self, f_cells: np.ndarray) -> np.ndarray:
        """(f, p_i) for every pressure basis function."""
        return self.pressure_basis.T @ cell_load(self.fine, f_cells)

    def project_pressure(self, p_cells: np.ndarray) -> np.ndarray:
        """Coefficients of the s-orthogonal projection pi(p)."""
        return self.pressure_basis.T @ (self.s_weights * p_cells)


def assemble_reduced(
    ops: FineOperators, cem: CemBasis, spectral: SpectralBasis
) -> ReducedSystem:
    Psi, P = cem.velocity, spectral.prolongation
    if Psi.shape[0] != ops.A.shape[0] or P.shape[0] != ops.B.shape[0]:
        raise ConfigurationError("basis and fine operators have mismatched dimensions")
    A = (Psi.T @ (ops.A @ Psi)).toarray()
    B = (Psi.T @ (ops.B.T @ P)).toarray()
    M = (P.T @ (ops.M @ P)).toarray()
    return ReducedSystem(
        0.5 * (A + A.T), B, 0.5 * (M + M.T), Psi, P, spectral.s_weights, ops.fine
    )


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    velocity: np.ndarray  # (N + 1, n_v)
    pressure: np.ndarray  # (N + 1, n_p)
    kind: str  # "fine" | "multiscale"
    meta: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def to_csv(self, path, norms: dict[str, np.ndarray]) -> None:
        """Write ``n,t,<norm columns>``; ``norms`` maps column name to per-step values."""
        names = list(norms)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(["n", "t", *names]) + "\n")
            for n, t in enumerate(self.times):
                vals = [repr(float(norms[k][n])) for k in names]
                fh.write(",".join([str(n), repr(float(t)), *vals]) + "\n")

    def save_snapshots(self, path, steps) -> None:
        steps = np.asarray(list(steps), dtype=int)
        np.savez_compressed(
            Path(path),
            steps=steps,
            times=self.times[steps],
            velocity=self.velocity[steps],
            pressure=self.pressure[steps],
            kind=np.array(self.kind),
        )


def time_grid(tau: float, T: float) -> np.ndarray:
    if tau <= 0 or T <= 0:
        raise ConfigurationError("tau and T must be positive")
    N = int(round(T / tau))
    if N < 1 or abs(N * tau - T) > 1e-9 * T:
        raise ConfigurationError(f"T={T} is not an integer multiple of tau={tau}")
    return np.arange(N + 1) * tau


class _ReducedStepper:
    """Factorized backward-Euler step for dense (A, B, M) with possibly singular A."""

    def __init__(self, A, B, M, tau):
        d, U = la.eigh(A)
        keep = d > GRAM_RTOL * d.max() if d.size and d.max() > 0 else np.zeros(d.size, bool)
        self.rank = int(keep.sum())
        self.U = U[:, keep]
        self.d = d[keep]
        W = (self.U.T @ B) / np.sqrt(self.d)[:, None]
        self.K = M / tau + W.T @ W
        self.K = 0.5 * (self.K + self.K.T)
        self.M, self.B, self.A, self.tau = M, B, A, tau
        try:
            self.chol = la.cho_factor(self.K)
        except la.LinAlgError as exc:
            raise NumericalError("reduced pressure system is not positive definite") from exc

    def velocity(self, p):
        return self.U @ ((self.U.T @ (self.B @ p)) / self.d)

    def step(self, p_old, f_new):
        rhs = self.M @ p_old / self.tau + f_new
        p = la.cho_solve(self.chol, rhs)
        res = np.linalg.norm(self.K @ p - rhs)
        if res > STEP_TOL * max(np.linalg.norm(rhs), np.linalg.norm(self.K @ p), 1e-300):
            p = p + la.cho_solve(self.chol, rhs - self.K @ p)
            res = np.linalg.norm(self.K @ p - rhs)
            if res > STEP_TOL * max(np.linalg.norm(rhs), 1e-300):
                raise NumericalError(f"reduced step residual {res:.2e} too large")
        return p, self.velocity(p)


def backward_euler(
    system: ReducedSystem,
    source: SourceSpec,
    tau: float,
    T: float,
    p0: np.ndarray | None = None,
) -> Trajectory:
    """Advance the multiscale system; ``p0`` defaults to pi(h_p)."""
    times = time_grid(tau, T)
    if p0 is None:
        p0 = system.project_pressure(np.asarray(source.h_p, dtype=float))
    stepper = _ReducedStepper(system.A, system.B, system.M, tau)
    P = np.empty((len(times), system.n_pressure))
    V = np.empty((len(times), system.n_velocity))
    P[0] = p0
    V[0] = stepper.velocity(p0)
    for n in range(len(times) - 1):
        P[n + 1], V[n + 1] = stepper.step(P[n], system.load(source.f(times[n + 1])))
    return Trajectory(times, V, P, "multiscale", {"velocity_rank": stepper.rank})


def solve_fine_reference(
    ops: FineOperators,
    source: SourceSpec,
    tau: float,
    T: float,
    method: str = "monolithic",
) -> Trajectory:
    """Fine RT0 reference; ``method="schur"`` uses a dense pressure Schur complement."""
    fine = ops.fine
    times = time_grid(tau, T)
    ne, nc = fine.n_edges, fine.n_cells
    p = np.asarray(source.h_p, dtype=float).copy()
    P = np.empty((len(times), nc))
    V = np.empty((len(times), ne))
    P[0] = p
    V[0] = np.asarray(source.h_v, dtype=float)
    if method == "monolithic":
        # symmetric indefinite form: [A, -B^T; -B, -M/tau]
        K = sp.bmat([[ops.A, -ops.B.T], [-ops.B, -ops.M / tau]], format="csc")
        lu = spla.splu(K)
        for n in range(len(times) - 1):
            rhs = np.concatenate([np.zeros(ne), -(ops.M @ P[n] / tau + cell_load(fine, source.f(times[n + 1])))])
            x = lu.solve(rhs)
            r = K @ x - rhs
            if np.linalg.norm(r) > STEP_TOL * max(np.linalg.norm(rhs), 1e-300):
                x = x + lu.solve(-r)
                r = K @ x - rhs
                if np.linalg.norm(r) > STEP_TOL * max(np.linalg.norm(rhs), 1e-300):
                    raise NumericalError(f"fine step {n + 1} residual too large")
            V[n + 1], P[n + 1] = x[:ne], x[ne:]
    elif method == "schur":
        stepper = _ReducedStepper(ops.A.toarray(), ops.B.T.toarray(), ops.M.toarray(), tau)
        for n in range(len(times) - 1):
            P[n + 1], V[n + 1] = stepper.step(P[n], cell_load(fine, source.f(times[n + 1])))
    else:
        raise ValueError(f"unknown method {method!r}")
    return Trajectory(times, V, P, "fine")


def prolongate(system: ReducedSystem, traj: Trajectory) -> Trajectory:
    if traj.kind != "multiscale":
        raise ValueError("only multiscale trajectories can be prolongated")
    V = np.asarray((system.velocity_basis @ traj.velocity.T).T)
    P = np.asarray((system.pressure_basis @ traj.pressure.T).T)
    return replace(traj, velocity=V, pressure=P, kind="fine", meta={**traj.meta, "prolongated": True})


def solve_steady(ops: FineOperators, f_cells: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Steady mixed Darcy problem with a zero-mean pressure constraint (requires int f = 0)."""
    fine = ops.fine
    ne, nc = fine.n_edges, fine.n_cells
    area = np.full((nc, 1), fine.cell_area)
    K = sp.bmat(
        [[ops.A, -ops.B.T, None], [-ops.B, None, sp.csr_matrix(area)], [None, sp.csr_matrix(area.T), None]],
        format="csc",
    )
    rhs = np.concatenate([np.zeros(ne), -cell_load(fine, f_cells), [0.0]])
    x = spla.splu(K).solve(rhs)
    return x[:ne], x[ne : ne + nc]
