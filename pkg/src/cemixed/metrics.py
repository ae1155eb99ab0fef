"""Norms and the relative error series e_p, e_v."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .grid import ConfigurationError, FineGrid
from .rt0 import assemble_velocity_mass
from .solver import Trajectory


def norm(x, kind: str, fine: FineGrid, coefficient=None) -> float:
    """sqrt of the quadratic form of ``kind``.

    ``"a"``: velocity, int kappa^{-1} v.v, ``coefficient`` = kappa (or an
    assembled velocity mass matrix).  ``"rho"`` and ``"s"``: cell-weighted
    pressure norms with ``coefficient`` = rho or kappa-tilde.  ``"L2"``:
    unweighted pressure norm.
    """
    x = np.asarray(x, dtype=float)
    if kind == "a":
        A = coefficient if sp.issparse(coefficient) else assemble_velocity_mass(fine, coefficient)
        if x.shape != (A.shape[0],):
            raise ConfigurationError(f"velocity vector has shape {x.shape}, expected ({A.shape[0]},)")
        return float(np.sqrt(max(x @ (A @ x), 0.0)))
    if x.shape != (fine.n_cells,):
        raise ConfigurationError(f"pressure vector has shape {x.shape}, expected ({fine.n_cells},)")
    if kind == "L2":
        w = 1.0
    elif kind in ("rho", "s"):
        if coefficient is None:
            raise ConfigurationError(f"{kind}-norm needs a weight")
        w = np.asarray(getattr(coefficient, "values", coefficient), dtype=float)
    else:
        raise ValueError(f"unknown norm kind {kind!r}")
    return float(np.sqrt(np.sum(w * x * x) * fine.cell_area))


@dataclass
class ErrorSeries:
    times: np.ndarray
    e_v: np.ndarray  # nan where the reference velocity vanishes
    e_p: np.ndarray
    config: dict = field(default_factory=dict)

    def defined(self) -> np.ndarray:
        return np.isfinite(self.e_v) & np.isfinite(self.e_p)

    @property
    def terminal(self) -> tuple[float, float]:
        return float(self.e_v[-1]), float(self.e_p[-1])

    def to_csv(self, path) -> None:
        """Header ``n,t,e_v,e_p``; undefined steps are skipped."""
        with open(path, "w", newline="") as fh:
            fh.write("n,t,e_v,e_p\n")
            for n in np.flatnonzero(self.defined()):
                fh.write(
                    f"{n},{float(self.times[n])!r},{float(self.e_v[n])!r},{float(self.e_p[n])!r}\n"
                )


def error_series(
    reference: Trajectory, approx: Trajectory, fine: FineGrid, kappa, config: dict | None = None
) -> ErrorSeries:
    """Per-step relative errors of ``approx`` (fine DOFs) against ``reference``."""
    if reference.velocity.shape != approx.velocity.shape or reference.pressure.shape != approx.pressure.shape:
        raise ConfigurationError("trajectories live on different grids or time grids")
    if not np.allclose(reference.times, approx.times, rtol=0, atol=1e-12):
        raise ConfigurationError("trajectories have different time grids")
    A = assemble_velocity_mass(fine, kappa)
    dv = reference.velocity - approx.velocity
    dp = reference.pressure - approx.pressure
    num_v = np.sqrt(np.maximum(np.einsum("ij,ij->i", dv, (A @ dv.T).T), 0))
    den_v = np.sqrt(np.maximum(np.einsum("ij,ij->i", reference.velocity, (A @ reference.velocity.T).T), 0))
    num_p = np.sqrt(np.sum(dp * dp, axis=1) * fine.cell_area)
    den_p = np.sqrt(np.sum(reference.pressure**2, axis=1) * fine.cell_area)
    with np.errstate(divide="ignore", invalid="ignore"):
        e_v = np.where(den_v > 0, num_v / den_v, np.nan)
        e_p = np.where(den_p > 0, num_p / den_p, np.nan)
    return ErrorSeries(reference.times.copy(), e_v, e_p, dict(config or {}))
