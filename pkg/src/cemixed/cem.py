"""Constrained energy minimizing velocity basis on oversampled elements.

For every selected auxiliary function p_j^i we solve, on K_i^+,

    a(psi, v) - b(v, q)              = 0          for v in V_0(K_i^+)
    s(pi q, pi r) + b(psi, r)        = s(p_j^i, r) for r in Q(K_i^+)

The projection term ``S P P^T S`` has rank ``m`` (number of auxiliary
functions inside K_i^+), so instead of forming it we carry ``mu = P^T S q``
as an extra unknown.  The resulting symmetric indefinite system

    [  A    -B^T    0   ] [psi]   [    0     ]
    [ -B     0    -S P  ] [ q ] = [ -S p_j^i ]
    [  0  -(S P)^T  I   ] [mu ]   [    0     ]

is sparse, factorized once per oversampled region and reused for every j and
every element sharing that region.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import CoarsePartition, ConfigurationError, FineGrid, Subdomain, oversample_box
from .rt0 import assemble_divergence, assemble_velocity_mass
from .spectral import SpectralBasis

RESIDUAL_TOL = 1e-10


class NumericalError(RuntimeError):
    """A linear solve failed or missed its residual tolerance."""


@dataclass(frozen=True)
class PiOperator:
    """s-orthogonal projection onto the auxiliary space, restricted to a subdomain."""

    vectors: sp.csc_matrix  # (n_cells_sub, m), s-orthonormal columns
    weights: np.ndarray  # kappa_tilde * |cell| on the subdomain
    columns: np.ndarray  # global auxiliary indices of the columns

    def __call__(self, q: np.ndarray) -> np.ndarray:
        return self.vectors @ (self.vectors.T @ (self.weights * q))

    def coefficients(self, q: np.ndarray) -> np.ndarray:
        return self.vectors.T @ (self.weights * q)

    def s_inner(self, p: np.ndarray, q: np.ndarray) -> float:
        return float(np.dot(p * self.weights, q))


def build_pi(spectral: SpectralBasis, sub: Subdomain | None = None) -> PiOperator:
    part = spectral.part
    if sub is None:
        sub = Subdomain.whole(part.fine)
        elements = range(part.n_elements)
    else:
        elements = sub.elements or np.unique(part.cell_element[sub.cells])
    cols = []
    for e in elements:
        if e >= len(spectral.spectra) or spectral.n_basis[e] < 1:
            raise ConfigurationError(f"no auxiliary basis on coarse element {e}")
        cols.append(np.arange(spectral.offsets[e], spectral.offsets[e + 1]))
    cols = np.concatenate(cols)
    P = spectral.prolongation[sub.cells][:, cols].tocsc()
    return PiOperator(P, spectral.s_weights[sub.cells], cols)


class LocalCemSolver:
    """Factorized CEM system on one oversampled region."""

    def __init__(self, fine: FineGrid, kappa, spectral: SpectralBasis, sub: Subdomain):
        self.sub = sub
        self.pi = build_pi(spectral, sub)
        self.A = assemble_velocity_mass(fine, kappa, sub)
        self.B = assemble_divergence(fine, sub)
        self.SP = sp.csc_matrix(sp.diags(self.pi.weights) @ self.pi.vectors)
        ne, nc, m = sub.n_edges, sub.n_cells, self.SP.shape[1]
        self.sizes = (ne, nc, m)
        K = sp.bmat(
            [
                [self.A, -self.B.T, None],
                [-self.B, None, -self.SP],
                [None, -self.SP.T, sp.identity(m)],
            ],
            format="csc",
        )
        self.K = K
        try:
            self.lu = spla.splu(K)
        except RuntimeError as exc:
            raise NumericalError(f"singular CEM system on region {sub.box}") from exc

    def solve(self, rhs_cells: np.ndarray, refine: int = 3):
        """Solve for right-hand sides ``S p`` given as (n_cells_sub, k) arrays."""
        ne, nc, m = self.sizes
        rhs_cells = np.atleast_2d(rhs_cells.T).T
        rhs = np.zeros((ne + nc + m, rhs_cells.shape[1]))
        rhs[ne : ne + nc] = -rhs_cells
        x = self.lu.solve(rhs)
        for _ in range(refine):
            psi, q = x[:ne], x[ne : ne + nc]
            r1, r2 = self.residuals(psi, q, rhs_cells)
            if max(r1.max(initial=0), r2.max(initial=0)) <= 0.01 * RESIDUAL_TOL:
                break
            x = x + self.lu.solve(rhs - self.K @ x)
        psi, q = x[:ne], x[ne : ne + nc]
        r1, r2 = self.residuals(psi, q, rhs_cells)
        worst = max(r1.max(initial=0), r2.max(initial=0))
        if not np.isfinite(worst) or worst > RESIDUAL_TOL:
            raise NumericalError(
                f"CEM residual {worst:.2e} exceeds {RESIDUAL_TOL:.0e} on region {self.sub.box}"
            )
        return psi, q

    def residuals(self, psi, q, rhs_cells):
        """Relative residuals of both CEM equations, one entry per right-hand side."""
        Apsi, Btq = self.A @ psi, self.B.T @ q
        Bpsi = self.B @ psi
        Gq = self.SP @ (self.SP.T @ q)
        den1 = np.maximum(np.linalg.norm(Apsi, axis=0), np.linalg.norm(Btq, axis=0))
        den2 = np.linalg.norm(rhs_cells, axis=0)
        r1 = np.linalg.norm(Apsi - Btq, axis=0) / np.where(den1 > 0, den1, 1.0)
        r2 = np.linalg.norm(Bpsi + Gq - rhs_cells, axis=0) / np.where(den2 > 0, den2, 1.0)
        return r1, r2


def _rhs(spectral: SpectralBasis, sub: Subdomain, element: int, js) -> np.ndarray:
    """S p_j^i on the cells of ``sub`` for the requested j's."""
    g2l = sub.local_cell_index()
    spec = spectral.spectra[element]
    rhs = np.zeros((sub.n_cells, len(js)))
    rhs[g2l[spec.cells]] = spec.weights[:, None] * spec.eigenvectors[:, list(js)]
    return rhs


def solve_cem_basis(
    fine: FineGrid, kappa, spectral: SpectralBasis, i: int, j: int, layers: int
) -> tuple[np.ndarray, np.ndarray]:
    """(psi_{j,ms}^i, q_{j,ms}^i) as global edge and cell vectors (j zero-based)."""
    part = spectral.part
    spectral.index(i, j)
    sub = part.box_subdomain(*oversample_box(part, i, layers))
    solver = LocalCemSolver(fine, kappa, spectral, sub)
    psi, q = solver.solve(_rhs(spectral, sub, i, [j]))
    psi_g = np.zeros(fine.n_edges)
    psi_g[sub.edges] = psi[:, 0]
    q_g = np.zeros(fine.n_cells)
    q_g[sub.cells] = q[:, 0]
    return psi_g, q_g


@dataclass(frozen=True)
class CemBasis:
    """Localized velocity basis, one column per auxiliary function (same ordering)."""

    velocity: sp.csc_matrix  # (n_edges, M)
    pressure: sp.csc_matrix  # (n_cells, M), companion q_{j,ms}^i
    element: np.ndarray
    local_index: np.ndarray
    layers: int
    boxes: tuple[tuple[int, int, int, int], ...]  # oversampled region per element

    @property
    def dim(self) -> int:
        return self.velocity.shape[1]


def auto_layers(contrast: float, H: float, max_layers: int) -> int:
    """ceil(ln(R_kappa / H^2)), clamped to [1, max_layers]."""
    l = max(1, math.ceil(math.log(contrast / H**2)))
    return max(1, min(l, max(max_layers, 1)))


def build_velocity_space(
    fine: FineGrid, kappa, spectral: SpectralBasis, layers: int, workers: int | None = None
) -> CemBasis:
    part: CoarsePartition = spectral.part
    if layers < 0:
        raise ConfigurationError(f"oversampling layers must be >= 0, got {layers}")
    boxes = [oversample_box(part, e, layers) for e in range(part.n_elements)]
    groups: dict[tuple, list[int]] = {}
    for e, box in enumerate(boxes):
        groups.setdefault(box, []).append(e)

    def work(box):
        sub = part.box_subdomain(*box)
        solver = LocalCemSolver(fine, kappa, spectral, sub)
        out = []
        for e in groups[box]:
            js = range(spectral.n_basis[e])
            psi, q = solver.solve(_rhs(spectral, sub, e, js))
            out.append((e, sub, psi, q))
        return out

    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, groups))
    else:
        results = [work(b) for b in groups]

    M = spectral.dim
    vr, vc, vv, pr, pc, pv = [], [], [], [], [], []
    for chunk in results:
        for e, sub, psi, q in chunk:
            cols = spectral.offsets[e] + np.arange(psi.shape[1])
            nz = np.nonzero(psi)
            vr.append(sub.edges[nz[0]])
            vc.append(cols[nz[1]])
            vv.append(psi[nz])
            nz = np.nonzero(q)
            pr.append(sub.cells[nz[0]])
            pc.append(cols[nz[1]])
            pv.append(q[nz])
    velocity = sp.csc_matrix(
        (np.concatenate(vv), (np.concatenate(vr), np.concatenate(vc))), shape=(fine.n_edges, M)
    )
    pressure = sp.csc_matrix(
        (np.concatenate(pv), (np.concatenate(pr), np.concatenate(pc))), shape=(fine.n_cells, M)
    )
    element = np.repeat(np.arange(part.n_elements), spectral.n_basis)
    local_index = np.concatenate([np.arange(n) for n in spectral.n_basis])
    return CemBasis(velocity, pressure, element, local_index, int(layers), tuple(boxes))
