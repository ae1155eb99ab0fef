"""Fine and coarse rectangular meshes, DOF numbering and subdomains.

Numbering conventions (all row-major, x fastest):

* cell ``c = iy * nx + ix``
* fine node ``n = iy * (nx + 1) + ix``
* velocity DOFs are the normal fluxes on interior edges.  The x-normal
  (vertical) edges come first, ``e = iy * (nx - 1) + ix`` for the edge between
  cells ``(ix, iy)`` and ``(ix + 1, iy)``; the y-normal (horizontal) edges
  follow, ``e = nvx + iy * nx + ix`` for the edge between ``(ix, iy)`` and
  ``(ix, iy + 1)``.  Edge normals point in +x / +y.

Boundary edges carry ``v.n = 0`` and are eliminated from the velocity space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class ConfigurationError(ValueError):
    """Raised for inconsistent mesh or experiment parameters."""


@dataclass(frozen=True)
class FineGrid:
    nx: int
    ny: int
    domain: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ConfigurationError(f"fine grid needs nx, ny >= 2, got {self.nx}x{self.ny}")
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ConfigurationError(f"degenerate domain {self.domain}")

    @property
    def hx(self) -> float:
        return (self.domain[1] - self.domain[0]) / self.nx

    @property
    def hy(self) -> float:
        return (self.domain[3] - self.domain[2]) / self.ny

    @property
    def cell_area(self) -> float:
        return self.hx * self.hy

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_xedges(self) -> int:
        """Number of interior x-normal (vertical) edges."""
        return (self.nx - 1) * self.ny

    @property
    def n_yedges(self) -> int:
        return self.nx * (self.ny - 1)

    @property
    def n_edges(self) -> int:
        """Number of velocity DOFs after eliminating boundary edges."""
        return self.n_xedges + self.n_yedges

    @cached_property
    def cell_centers(self) -> np.ndarray:
        ix, iy = self.cell_ij
        return np.column_stack(
            [self.domain[0] + (ix + 0.5) * self.hx, self.domain[2] + (iy + 0.5) * self.hy]
        )

    @cached_property
    def cell_ij(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.arange(self.n_cells)
        return c % self.nx, c // self.nx

    @cached_property
    def edge_cells(self) -> np.ndarray:
        """(n_edges, 2) array: cell on the minus side, cell on the plus side."""
        nx, ny = self.nx, self.ny
        ix, iy = np.meshgrid(np.arange(nx - 1), np.arange(ny), indexing="xy")
        left = (iy * nx + ix).ravel()
        xe = np.column_stack([left, left + 1])
        ix, iy = np.meshgrid(np.arange(nx), np.arange(ny - 1), indexing="xy")
        below = (iy * nx + ix).ravel()
        ye = np.column_stack([below, below + nx])
        return np.vstack([xe, ye])

    @cached_property
    def edge_axis(self) -> np.ndarray:
        """0 for x-normal edges, 1 for y-normal edges."""
        return np.concatenate(
            [np.zeros(self.n_xedges, dtype=int), np.ones(self.n_yedges, dtype=int)]
        )

    @cached_property
    def cell_faces(self) -> np.ndarray:
        """(n_cells, 4) velocity DOF of the left, right, bottom, top face; -1 on dOmega."""
        nx, ny = self.nx, self.ny
        ix, iy = self.cell_ij
        faces = np.full((self.n_cells, 4), -1, dtype=int)
        m = ix > 0
        faces[m, 0] = iy[m] * (nx - 1) + ix[m] - 1
        m = ix < nx - 1
        faces[m, 1] = iy[m] * (nx - 1) + ix[m]
        m = iy > 0
        faces[m, 2] = self.n_xedges + (iy[m] - 1) * nx + ix[m]
        m = iy < ny - 1
        faces[m, 3] = self.n_xedges + iy[m] * nx + ix[m]
        return faces

    @cached_property
    def all_edges(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Every mesh edge including dOmega: (adjacent cells with -1 outside, boundary flag, DOF or -1).

        Vertical edges come first (``iy * (nx + 1) + ix`` for the edge at x-line ``ix``),
        then horizontal ones (``iy * nx + ix`` at y-line ``iy``).
        """
        nx, ny = self.nx, self.ny
        lines, rows = np.meshgrid(np.arange(nx + 1), np.arange(ny), indexing="xy")
        lines, rows = lines.ravel(), rows.ravel()
        v_minus = np.where(lines > 0, rows * nx + lines - 1, -1)
        v_plus = np.where(lines < nx, rows * nx + lines, -1)
        v_dof = np.where((lines > 0) & (lines < nx), rows * (nx - 1) + lines - 1, -1)
        cols, lines = np.meshgrid(np.arange(nx), np.arange(ny + 1), indexing="xy")
        cols, lines = cols.ravel(), lines.ravel()
        h_minus = np.where(lines > 0, (lines - 1) * nx + cols, -1)
        h_plus = np.where(lines < ny, lines * nx + cols, -1)
        h_dof = np.where((lines > 0) & (lines < ny), self.n_xedges + (lines - 1) * nx + cols, -1)
        cells = np.vstack([np.column_stack([v_minus, v_plus]), np.column_stack([h_minus, h_plus])])
        dof = np.concatenate([v_dof, h_dof])
        return cells, dof < 0, dof

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        """(n_cells, 4) fine nodes of each cell ordered (0,0), (1,0), (0,1), (1,1)."""
        ix, iy = self.cell_ij
        n0 = iy * (self.nx + 1) + ix
        return np.column_stack([n0, n0 + 1, n0 + self.nx + 1, n0 + self.nx + 2])


def build_fine_grid(nx: int, ny: int, domain=(0.0, 1.0, 0.0, 1.0)) -> FineGrid:
    return FineGrid(int(nx), int(ny), tuple(float(v) for v in domain))


@dataclass(frozen=True)
class Subdomain:
    """A set of fine cells with its RT0 space V_{h,0}(S) x Q_h(S).

    ``cells`` and ``edges`` are sorted global indices and double as the
    local-to-global maps.  Only edges with both neighbours inside the set are
    velocity DOFs, so ``v.n = 0`` on the subdomain boundary is structural.
    """

    fine: FineGrid
    cells: np.ndarray
    elements: tuple[int, ...] = ()
    box: tuple[int, int, int, int] | None = None
    edges: np.ndarray = field(init=False)

    def __post_init__(self):
        cells = np.unique(np.asarray(self.cells, dtype=int))
        object.__setattr__(self, "cells", cells)
        inside = np.zeros(self.fine.n_cells, dtype=bool)
        inside[cells] = True
        ec = self.fine.edge_cells
        edges = np.flatnonzero(inside[ec[:, 0]] & inside[ec[:, 1]])
        object.__setattr__(self, "edges", edges)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def cell_mask(self) -> np.ndarray:
        m = np.zeros(self.fine.n_cells, dtype=bool)
        m[self.cells] = True
        return m

    def local_cell_index(self) -> np.ndarray:
        """Global-to-local cell map (-1 outside)."""
        g = np.full(self.fine.n_cells, -1, dtype=int)
        g[self.cells] = np.arange(self.n_cells)
        return g

    def local_edge_index(self) -> np.ndarray:
        g = np.full(self.fine.n_edges, -1, dtype=int)
        g[self.edges] = np.arange(self.n_edges)
        return g

    @classmethod
    def whole(cls, fine: FineGrid) -> "Subdomain":
        return cls(fine, np.arange(fine.n_cells))


@dataclass(frozen=True)
class CoarsePartition:
    fine: FineGrid
    Nx: int
    Ny: int

    def __post_init__(self):
        if self.Nx < 1 or self.Ny < 1:
            raise ConfigurationError("coarse grid needs at least one element per axis")
        if self.fine.nx % self.Nx or self.fine.ny % self.Ny:
            raise ConfigurationError(
                f"coarse {self.Nx}x{self.Ny} does not divide fine {self.fine.nx}x{self.fine.ny}"
            )

    @property
    def mx(self) -> int:
        """Fine cells per coarse element along x."""
        return self.fine.nx // self.Nx

    @property
    def my(self) -> int:
        return self.fine.ny // self.Ny

    @property
    def Hx(self) -> float:
        return self.mx * self.fine.hx

    @property
    def Hy(self) -> float:
        return self.my * self.fine.hy

    @property
    def H(self) -> float:
        """Coarse axis length (1/Nx on the unit square)."""
        return max(self.Hx, self.Hy)

    @property
    def diameter(self) -> float:
        return float(np.hypot(self.Hx, self.Hy))

    @property
    def n_elements(self) -> int:
        return self.Nx * self.Ny

    @property
    def n_nodes(self) -> int:
        return (self.Nx + 1) * (self.Ny + 1)

    @property
    def max_layers(self) -> int:
        """Smallest layer count for which every oversampled element is the whole domain."""
        return max(self.Nx, self.Ny) - 1

    def element_ij(self, e: int) -> tuple[int, int]:
        self._check_element(e)
        return e % self.Nx, e // self.Nx

    @cached_property
    def cell_element(self) -> np.ndarray:
        ix, iy = self.fine.cell_ij
        return (iy // self.my) * self.Nx + ix // self.mx

    @cached_property
    def element_cells(self) -> list[np.ndarray]:
        """Index sets I_j, row-major inside each element."""
        order = np.argsort(self.cell_element, kind="stable")
        return np.split(order, np.arange(1, self.n_elements) * self.mx * self.my)

    @cached_property
    def interior_edges(self) -> np.ndarray:
        """(N_in, 2) pairs of coarse elements sharing an interior coarse edge.

        Vertical coarse edges first, then horizontal, each row-major.
        """
        Nx, Ny = self.Nx, self.Ny
        ix, iy = np.meshgrid(np.arange(Nx - 1), np.arange(Ny), indexing="xy")
        a = (iy * Nx + ix).ravel()
        ix, iy = np.meshgrid(np.arange(Nx), np.arange(Ny - 1), indexing="xy")
        b = (iy * Nx + ix).ravel()
        return np.vstack([np.column_stack([a, a + 1]), np.column_stack([b, b + Nx])])

    @property
    def n_interior_edges(self) -> int:
        return (self.Nx - 1) * self.Ny + self.Nx * (self.Ny - 1)

    @cached_property
    def node_is_interior(self) -> np.ndarray:
        k = np.arange(self.n_nodes)
        ix, iy = k % (self.Nx + 1), k // (self.Nx + 1)
        return (ix > 0) & (ix < self.Nx) & (iy > 0) & (iy < self.Ny)

    @cached_property
    def element_nodes(self) -> np.ndarray:
        """(N_e, 4) coarse nodes of each element ordered (0,0), (1,0), (0,1), (1,1)."""
        e = np.arange(self.n_elements)
        ix, iy = e % self.Nx, e // self.Nx
        n0 = iy * (self.Nx + 1) + ix
        return np.column_stack([n0, n0 + 1, n0 + self.Nx + 1, n0 + self.Nx + 2])

    def fine_node_of(self, node: int) -> int:
        """Fine node index at the position of a coarse node."""
        ix, iy = node % (self.Nx + 1), node // (self.Nx + 1)
        return iy * self.my * (self.fine.nx + 1) + ix * self.mx

    def box_subdomain(self, ix0: int, ix1: int, iy0: int, iy1: int) -> Subdomain:
        """Union of coarse elements with ix0 <= ix <= ix1, iy0 <= iy <= iy1."""
        elements = tuple(
            int(iy * self.Nx + ix) for iy in range(iy0, iy1 + 1) for ix in range(ix0, ix1 + 1)
        )
        cells = np.concatenate([self.element_cells[e] for e in elements])
        return Subdomain(self.fine, cells, elements, (ix0, ix1, iy0, iy1))

    def _check_element(self, e: int):
        if not 0 <= e < self.n_elements:
            raise IndexError(f"coarse element {e} out of range [0, {self.n_elements})")


def build_coarse_partition(fine: FineGrid, Nx: int, Ny: int) -> CoarsePartition:
    return CoarsePartition(fine, int(Nx), int(Ny))


def oversample_box(part: CoarsePartition, i: int, layers: int) -> tuple[int, int, int, int]:
    if layers < 0:
        raise ConfigurationError(f"oversampling layers must be >= 0, got {layers}")
    ix, iy = part.element_ij(i)
    return (
        max(ix - layers, 0),
        min(ix + layers, part.Nx - 1),
        max(iy - layers, 0),
        min(iy + layers, part.Ny - 1),
    )


def oversample_element(part: CoarsePartition, i: int, layers: int) -> Subdomain:
    """K_i enlarged by ``layers`` full coarse rings (Chebyshev distance), clipped to the domain."""
    return part.box_subdomain(*oversample_box(part, i, layers))


def coarse_neighborhood(part: CoarsePartition, index: int, kind: str = "edge") -> Subdomain:
    """Coarse elements sharing an interior coarse edge (``kind="edge"``) or a coarse node."""
    if kind == "edge":
        if not 0 <= index < part.n_interior_edges:
            raise IndexError(f"interior coarse edge {index} out of range")
        a, b = part.interior_edges[index]
        (ax, ay), (bx, by) = part.element_ij(a), part.element_ij(b)
        return part.box_subdomain(ax, bx, ay, by)
    if kind == "node":
        if not 0 <= index < part.n_nodes:
            raise IndexError(f"coarse node {index} out of range")
        ix, iy = index % (part.Nx + 1), index // (part.Nx + 1)
        return part.box_subdomain(
            max(ix - 1, 0), min(ix, part.Nx - 1), max(iy - 1, 0), min(iy, part.Ny - 1)
        )
    raise ValueError(f"unknown neighbourhood kind {kind!r}")
