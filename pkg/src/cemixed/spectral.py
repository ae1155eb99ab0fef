"""Local spectral problems and the auxiliary pressure space Q_ms.

On each coarse element the velocity is eliminated from the local mixed
eigenproblem, leaving the dense pressure problem

    (B A^{-1} B^T) p = lambda S p,

with ``S`` the kappa-tilde weighted cell mass.  Because ``B^T 1 = 0`` exactly
(no flux leaves the element) the constant is always the first eigenvector
with eigenvalue zero; it is split off analytically and the rest of the
spectrum is computed on its S-orthogonal complement.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from .grid import CoarsePartition, ConfigurationError, FineGrid, oversample_element
from .rt0 import assemble_divergence, assemble_velocity_mass

# Ogita-Aishima correction steps applied to every eigenpair; a third step gains nothing
REFINE_STEPS = 2
# eigenvalues this close (relative) are treated as one cluster when orthonormalizing
CLUSTER_RTOL = 1e-3


@dataclass(frozen=True)
class ElementSpectrum:
    part: CoarsePartition
    element: int
    cells: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (n_cells_local, L), S-orthonormal columns
    weights: np.ndarray  # kappa_tilde * |cell| on the element

    @property
    def size(self) -> int:
        return len(self.eigenvalues)


def local_schur(fine: FineGrid, part: CoarsePartition, kappa, element: int) -> np.ndarray:
    """Dense B A^{-1} B^T on V_{h,0}(K_i) x Q_h(K_i), symmetric by construction."""
    sub = oversample_element(part, element, 0)
    A = assemble_velocity_mass(fine, kappa, sub).toarray()
    B = assemble_divergence(fine, sub).toarray()
    if A.shape[0] == 0:
        return np.zeros((sub.n_cells, sub.n_cells))
    try:
        L = la.cholesky(A, lower=True)
    except la.LinAlgError as exc:
        raise RuntimeError(f"velocity mass on element {element} is not positive definite") from exc
    W = la.solve_triangular(L, B.T, lower=True)
    return W.T @ W


def _sign_fix(vectors: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _refine(C: np.ndarray, w: np.ndarray, P: np.ndarray, lam: np.ndarray):
    """One Ogita-Aishima correction of all pairs of C p = lam diag(w) p.

    The dense eigensolver is only normwise accurate, which leaves residuals
    near eps ||C|| for the interior of a high-contrast spectrum.  The products
    P^T C P and P^T S P carry componentwise rounding, so one correction brings
    each pair close to its own evaluation floor.
    """
    n = P.shape[1]
    S = P.T @ (C @ P)
    R = np.eye(n) - P.T @ (w[:, None] * P)
    lk = np.diag(S) / (1 - np.diag(R))
    gap = 2 * (np.linalg.norm(S - np.diag(lk)) + np.linalg.norm(C) * np.linalg.norm(R))
    denom = lk[None, :] - lk[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        # near-degenerate pairs only get re-orthogonalized
        E = np.where(np.abs(denom) > gap, (S + lk[None, :] * R) / denom, R / 2)
    np.fill_diagonal(E, np.diag(R) / 2)
    return P + P @ E, lk


def _orthonormalize_clusters(P: np.ndarray, w: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Symmetric s-orthonormalization inside clusters of close eigenvalues.

    The refinement only symmetrizes near-degenerate pairs; mixing inside a
    cluster moves residuals by at most the cluster width times the mixing.
    """
    P = P.copy()
    order = np.argsort(lam, kind="stable")
    breaks = np.flatnonzero(np.diff(lam[order]) > CLUSTER_RTOL * np.abs(lam[order][1:])) + 1
    for group in np.split(order, breaks):
        Pg = P[:, group]
        mu, U = la.eigh(Pg.T @ (w[:, None] * Pg))
        P[:, group] = Pg @ (U / np.sqrt(mu)) @ U.T
    return P


def solve_local_spectral(
    fine: FineGrid, part: CoarsePartition, kappa, kappa_tilde: np.ndarray, element: int
) -> ElementSpectrum:
    cells = part.element_cells[element]
    w = np.asarray(kappa_tilde, dtype=float)[cells] * fine.cell_area
    if np.any(w <= 0):
        raise ConfigurationError(f"kappa-tilde vanishes on element {element}")
    C = local_schur(fine, part, kappa, element)
    n = len(cells)
    const = np.full((n, 1), 1.0 / np.sqrt(w.sum()))
    if n == 1:
        return ElementSpectrum(part, element, cells, np.zeros(1), const, w)
    # S is diagonal: with y = S^{1/2} p the problem becomes a standard, well balanced one
    d = np.sqrt(w)
    Chat = C / d[:, None] / d[None, :]
    # Householder basis of the complement of the scaled constant mode
    Q, _ = la.qr((d / np.linalg.norm(d))[:, None], mode="full")
    Z = Q[:, 1:]
    Cz = Z.T @ Chat @ Z
    lam, Y = la.eigh(0.5 * (Cz + Cz.T))
    P = np.hstack([const, (Z @ Y) / d[:, None]])
    lam = np.concatenate([[0.0], lam])
    for _ in range(REFINE_STEPS):
        P, lam = _refine(C, w, P, lam)
    # the constant mode is exact
    P[:, 1:] = _orthonormalize_clusters(P[:, 1:], w, lam[1:])
    P[:, 0], lam[0] = const[:, 0], 0.0
    order = np.concatenate([[0], 1 + np.argsort(lam[1:], kind="stable")])
    P, lam = P[:, order], lam[order]
    return ElementSpectrum(part, element, cells, lam, _sign_fix(P), w)


def solve_all_spectral(
    fine: FineGrid, part: CoarsePartition, kappa, kappa_tilde, workers: int | None = None
) -> list[ElementSpectrum]:
    def work(e):
        return solve_local_spectral(fine, part, kappa, kappa_tilde, e)

    elements = range(part.n_elements)
    if workers and workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(work, elements))
    return [work(e) for e in elements]


@dataclass(frozen=True)
class SpectralBasis:
    """First ``n_basis[i]`` eigenpairs of every coarse element."""

    part: CoarsePartition
    spectra: tuple[ElementSpectrum, ...]
    n_basis: np.ndarray
    Lambda: float

    @cached_property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.n_basis)])

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    def vectors(self, element: int) -> np.ndarray:
        return self.spectra[element].eigenvectors[:, : self.n_basis[element]]

    def eigenvalues(self, element: int) -> np.ndarray:
        return self.spectra[element].eigenvalues[: self.n_basis[element]]

    @cached_property
    def prolongation(self) -> sp.csc_matrix:
        """(n_cells, M) matrix whose columns are the selected p_j^i, element-major."""
        rows, cols, vals = [], [], []
        for e, spec in enumerate(self.spectra):
            V = self.vectors(e)
            j = self.offsets[e] + np.arange(V.shape[1])
            rows.append(np.repeat(spec.cells, V.shape[1]))
            cols.append(np.tile(j, len(spec.cells)))
            vals.append(V.ravel())
        n = self.part.fine.n_cells
        return sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, self.dim),
        )

    @cached_property
    def s_weights(self) -> np.ndarray:
        """kappa_tilde * |cell| as a global cell vector."""
        out = np.empty(self.part.fine.n_cells)
        for spec in self.spectra:
            out[spec.cells] = spec.weights
        return out

    def index(self, element: int, j: int) -> int:
        """Global basis index of p_j^element (j zero-based)."""
        if not 0 <= j < self.n_basis[element]:
            raise IndexError(f"basis {j} not selected on element {element}")
        return int(self.offsets[element] + j)


def select_basis(spectra, n_basis: int) -> SpectralBasis:
    spectra = tuple(spectra)
    if not spectra:
        raise ConfigurationError("no element spectra")
    sizes = np.array([s.size for s in spectra])
    if not 1 <= n_basis <= sizes.min():
        raise ConfigurationError(f"L_z={n_basis} outside [1, {sizes.min()}]")
    J = np.full(len(spectra), int(n_basis))
    excluded = [s.eigenvalues[n_basis] for s in spectra if s.size > n_basis]
    Lam = float(min(excluded)) if excluded else float("inf")
    return SpectralBasis(spectra[0].part, spectra, J, Lam)
