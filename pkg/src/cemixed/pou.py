"""Multiscale partition of unity and the spectral weight kappa-tilde.

Each chi_i solves a cellwise-kappa diffusion problem with a Q1 fine
discretization on every coarse element touching node i, with the bilinear hat
trace of node i as Dirichlet data on the element boundary.  All coarse nodes
are included, boundary nodes too, so the functions sum to one everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import CoarsePartition, FineGrid


def q1_stiffness(hx: float, hy: float) -> np.ndarray:
    """Q1 element stiffness for unit coefficient, nodes ordered (0,0),(1,0),(0,1),(1,1)."""
    kx = np.array([[1.0, -1.0], [-1.0, 1.0]]) / hx
    ky = np.array([[1.0, -1.0], [-1.0, 1.0]]) / hy
    mx = np.array([[2.0, 1.0], [1.0, 2.0]]) * hx / 6.0
    my = np.array([[2.0, 1.0], [1.0, 2.0]]) * hy / 6.0
    return np.kron(my, kx) + np.kron(ky, mx)


def assemble_q1(mx: int, my: int, hx: float, hy: float, kappa: np.ndarray) -> sp.csr_matrix:
    """Q1 stiffness on an mx-by-my block of cells (cell values row-major)."""
    ke = q1_stiffness(hx, hy)
    ix, iy = np.meshgrid(np.arange(mx), np.arange(my), indexing="xy")
    n0 = (iy * (mx + 1) + ix).ravel()
    nodes = np.column_stack([n0, n0 + 1, n0 + mx + 1, n0 + mx + 2])
    rows = np.repeat(nodes, 4, axis=1).ravel()
    cols = np.tile(nodes, (1, 4)).ravel()
    vals = (np.asarray(kappa, dtype=float)[:, None] * ke.ravel()[None, :]).ravel()
    n = (mx + 1) * (my + 1)
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def hat_traces(mx: int, my: int) -> np.ndarray:
    """(4, n_local_nodes) bilinear hats of the four element corners on the local fine nodes."""
    xi = np.arange(mx + 1) / mx
    eta = np.arange(my + 1) / my
    X, Y = np.meshgrid(xi, eta, indexing="xy")
    X, Y = X.ravel(), Y.ravel()
    return np.array([(1 - X) * (1 - Y), X * (1 - Y), (1 - X) * Y, X * Y])


def cell_gradient_sq(u: np.ndarray, mx: int, my: int, hx: float, hy: float) -> np.ndarray:
    """|grad u|^2 of a Q1 nodal field at the cell centres; u has shape (..., n_local_nodes)."""
    u = u.reshape(u.shape[:-1] + (my + 1, mx + 1))
    u00, u10 = u[..., :-1, :-1], u[..., :-1, 1:]
    u01, u11 = u[..., 1:, :-1], u[..., 1:, 1:]
    gx = ((u10 - u00) + (u11 - u01)) / (2 * hx)
    gy = ((u01 - u00) + (u11 - u10)) / (2 * hy)
    return (gx**2 + gy**2).reshape(u.shape[:-2] + (mx * my,))


@dataclass(frozen=True)
class PartitionOfUnity:
    """Element-wise storage of chi.

    ``local[e, a]`` holds chi of the coarse node ``part.element_nodes[e, a]`` on
    the fine nodes of element ``e`` (local row-major numbering) and
    ``grad_sq[e, a]`` the matching cell-centre |grad chi|^2 on its cells.
    """

    part: CoarsePartition
    local: np.ndarray
    grad_sq: np.ndarray

    def element_node_indices(self, e: int) -> np.ndarray:
        """Global fine node indices of element ``e`` in local order."""
        part = self.part
        ix, iy = part.element_ij(e)
        jx, jy = np.meshgrid(
            np.arange(ix * part.mx, (ix + 1) * part.mx + 1),
            np.arange(iy * part.my, (iy + 1) * part.my + 1),
            indexing="xy",
        )
        return (jy * (part.fine.nx + 1) + jx).ravel()

    def chi(self, node: int) -> np.ndarray:
        """chi_node as a global fine nodal vector (zero outside its neighbourhood)."""
        out = np.zeros(self.part.fine.n_nodes)
        for e, a in zip(*np.nonzero(self.part.element_nodes == node)):
            out[self.element_node_indices(e)] = self.local[e, a]
        return out

    def total(self) -> np.ndarray:
        """Sum of all chi_i at every fine node."""
        out = np.zeros(self.part.fine.n_nodes)
        seen = np.zeros(self.part.fine.n_nodes, dtype=bool)
        for e in range(self.part.n_elements):
            idx = self.element_node_indices(e)
            s = self.local[e].sum(axis=0)
            # nodes on shared coarse edges are seen from several elements with equal values
            out[idx] = np.where(seen[idx], out[idx], s)
            seen[idx] = True
        return out


def _solve_element(part: CoarsePartition, kappa: np.ndarray, e: int) -> np.ndarray:
    mx, my = part.mx, part.my
    fine = part.fine
    K = assemble_q1(mx, my, fine.hx, fine.hy, kappa[part.element_cells[e]])
    g = hat_traces(mx, my)
    n = (mx + 1) * (my + 1)
    jx, jy = np.arange(n) % (mx + 1), np.arange(n) // (mx + 1)
    interior = (jx > 0) & (jx < mx) & (jy > 0) & (jy < my)
    u = g.copy()
    if interior.any():
        I, Bd = np.flatnonzero(interior), np.flatnonzero(~interior)
        K_II = K[I][:, I].tocsc()
        rhs = -(K[I][:, Bd] @ g[:, Bd].T)
        u[:, I] = np.atleast_2d(spla.splu(K_II).solve(np.asarray(rhs))).reshape(len(I), 4).T
    return u


def solve_pou(fine: FineGrid, part: CoarsePartition, kappa) -> PartitionOfUnity:
    kappa = np.asarray(getattr(kappa, "values", kappa), dtype=float)
    mx, my = part.mx, part.my
    local = np.empty((part.n_elements, 4, (mx + 1) * (my + 1)))
    for e in range(part.n_elements):
        local[e] = _solve_element(part, kappa, e)
    grad_sq = cell_gradient_sq(local, mx, my, fine.hx, fine.hy)
    return PartitionOfUnity(part, local, grad_sq)


def compute_kappa_tilde(kappa, pou: PartitionOfUnity) -> np.ndarray:
    """kappa * sum_j |grad chi_j|^2 per fine cell; only the four corner nodes contribute."""
    kappa = np.asarray(getattr(kappa, "values", kappa), dtype=float)
    part = pou.part
    out = np.empty(part.fine.n_cells)
    summed = pou.grad_sq.sum(axis=1)
    for e, cells in enumerate(part.element_cells):
        out[cells] = kappa[cells] * summed[e]
    return out
