"""Lowest-order Raviart-Thomas matrices on the fine grid.

Velocity basis functions have unit normal component on their edge, so the
flux through an edge equals its DOF times the edge length.  With cellwise
constant coefficients every integral is evaluated in closed form.

Shapes: ``A`` is (edges x edges), ``B`` is (cells x edges) with
``b(v, q) = q @ B @ v``, pressure mass matrices are diagonal (cells x cells).
Every function takes an optional :class:`~cemixed.grid.Subdomain`; the result
then acts on ``V_{h,0}(S) x Q_h(S)`` in the subdomain's local numbering.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .grid import ConfigurationError, FineGrid, Subdomain

_LOCAL_MASS = np.array([[1.0 / 3.0, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 3.0]])


def _cell_values(fine: FineGrid, values, name: str) -> np.ndarray:
    values = np.asarray(getattr(values, "values", values), dtype=float)
    if values.ndim == 0:
        values = np.full(fine.n_cells, float(values))
    if values.shape != (fine.n_cells,):
        raise ConfigurationError(f"{name} has shape {values.shape}, expected ({fine.n_cells},)")
    return values


def _local_faces(fine: FineGrid, sub: Subdomain | None):
    if sub is None:
        return np.arange(fine.n_cells), fine.cell_faces, fine.n_cells, fine.n_edges
    g2l = sub.local_edge_index()
    faces = fine.cell_faces[sub.cells]
    faces = np.where(faces >= 0, g2l[np.maximum(faces, 0)], -1)
    return sub.cells, faces, sub.n_cells, sub.n_edges


def assemble_velocity_mass(fine: FineGrid, kappa, sub: Subdomain | None = None) -> sp.csr_matrix:
    """a(v, w) = int kappa^{-1} v.w over the cells of ``sub`` (or the whole grid)."""
    kappa = _cell_values(fine, kappa, "kappa")
    cells, faces, _, n = _local_faces(fine, sub)
    w = fine.cell_area / kappa[cells]
    rows, cols, vals = [], [], []
    for pair in ((0, 1), (2, 3)):
        f = faces[:, pair]
        for a in range(2):
            for b in range(2):
                keep = (f[:, a] >= 0) & (f[:, b] >= 0)
                rows.append(f[keep, a])
                cols.append(f[keep, b])
                vals.append(w[keep] * _LOCAL_MASS[a, b])
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return A.tocsr()


def assemble_divergence(fine: FineGrid, sub: Subdomain | None = None) -> sp.csr_matrix:
    """b(v, q) = int q div v: +-(face length) per (cell, face) pair, normals along +x/+y."""
    cells, faces, nc, ne = _local_faces(fine, sub)
    signs = np.array([-fine.hy, fine.hy, -fine.hx, fine.hx])
    local = np.arange(len(cells))
    rows, cols, vals = [], [], []
    for k in range(4):
        keep = faces[:, k] >= 0
        rows.append(local[keep])
        cols.append(faces[keep, k])
        vals.append(np.full(keep.sum(), signs[k]))
    B = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nc, ne)
    )
    return B.tocsr()


def assemble_pressure_mass(fine: FineGrid, weight, sub: Subdomain | None = None) -> sp.dia_matrix:
    """Diagonal matrix of int weight * p * q over each cell."""
    weight = _cell_values(fine, weight, "weight")
    if np.any(weight <= 0):
        raise ConfigurationError("pressure-mass weight must be positive")
    cells = np.arange(fine.n_cells) if sub is None else sub.cells
    return sp.diags(weight[cells] * fine.cell_area).tocsr()


def cell_load(fine: FineGrid, f_cells: np.ndarray) -> np.ndarray:
    """(f, q) for the cell indicator basis."""
    return np.asarray(f_cells, dtype=float) * fine.cell_area
