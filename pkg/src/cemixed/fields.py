"""Permeability fields, raster I/O and the source/initial data of the experiments."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .grid import ConfigurationError, FineGrid


@dataclass(frozen=True)
class PermeabilityField:
    nx: int
    ny: int
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=float).ravel()
        if v.size != self.nx * self.ny:
            raise ConfigurationError(f"field has {v.size} values, expected {self.nx * self.ny}")
        if not np.all(np.isfinite(v)):
            raise ConfigurationError("permeability must be finite")
        if v.min() <= 0:
            raise ConfigurationError("permeability must be strictly positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def kmin(self) -> float:
        return float(self.values.min())

    @property
    def kmax(self) -> float:
        return float(self.values.max())

    def check_grid(self, fine: FineGrid):
        if (fine.nx, fine.ny) != (self.nx, self.ny):
            raise ConfigurationError(
                f"field is {self.nx}x{self.ny} but fine grid is {fine.nx}x{fine.ny}"
            )

    def digest(self) -> str:
        h = hashlib.sha256(np.array([self.nx, self.ny], dtype=np.int64).tobytes())
        h.update(self.values.tobytes())
        return h.hexdigest()[:16]

    def as_image(self) -> np.ndarray:
        return self.values.reshape(self.ny, self.nx)


def generate_channelized(
    nx: int, ny: int, n_channels: int, contrast: float, seed: int = 0
) -> PermeabilityField:
    """Background 1 with high-permeability strips and inclusions set to ``contrast``.

    Two thirds of the features are long horizontal or vertical strips spanning
    most of the domain, the rest are short blocks.  Widths are one or two fine
    cells.
    """
    if contrast < 1:
        raise ConfigurationError(f"contrast must be >= 1, got {contrast}")
    if n_channels < 0:
        raise ConfigurationError("n_channels must be >= 0")
    rng = np.random.default_rng(seed)
    img = np.ones((ny, nx))
    for k in range(n_channels):
        horizontal = rng.random() < 0.5
        along, across = (nx, ny) if horizontal else (ny, nx)
        width = min(int(rng.integers(1, 3)), across)
        if k % 3 == 2:
            length = int(rng.integers(max(2, along // 8), max(3, along // 4) + 1))
        else:
            length = int(rng.integers(max(2, (3 * along) // 5), along + 1))
        length = min(length, along)
        start = int(rng.integers(0, along - length + 1))
        pos = int(rng.integers(0, across - width + 1))
        if horizontal:
            img[pos : pos + width, start : start + length] = contrast
        else:
            img[start : start + length, pos : pos + width] = contrast
    return PermeabilityField(nx, ny, img.ravel())


def uniform_field(nx: int, ny: int, value: float = 1.0) -> PermeabilityField:
    return PermeabilityField(nx, ny, np.full(nx * ny, float(value)))


def invert_field(field: PermeabilityField) -> PermeabilityField:
    return PermeabilityField(field.nx, field.ny, 1.0 / field.values)


def contrast(field: PermeabilityField) -> float:
    return field.kmax / field.kmin


def load_raster(path) -> PermeabilityField:
    """Read ``nx ny`` followed by ``nx*ny`` positive reals (row-major, x fastest)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read raster: {exc}") from None
    lines = text.splitlines()
    if not lines:
        raise ConfigurationError(f"{path}: empty raster file")
    header = lines[0].split()
    try:
        if len(header) != 2:
            raise ValueError
        nx, ny = int(header[0]), int(header[1])
    except ValueError:
        raise ConfigurationError(f"{path}: malformed header {lines[0]!r}") from None
    if nx < 1 or ny < 1:
        raise ConfigurationError(f"{path}: bad dimensions {nx}x{ny}")
    try:
        values = np.array([float(tok) for tok in " ".join(lines[1:]).split()])
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    if values.size != nx * ny:
        raise ConfigurationError(f"{path}: expected {nx * ny} values, found {values.size}")
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise ConfigurationError(f"{path}: permeability values must be finite and positive")
    return PermeabilityField(nx, ny, values)


def save_raster(field: PermeabilityField, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{field.nx} {field.ny}\n")
        for row in field.as_image():
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


@dataclass(frozen=True)
class SourceSpec:
    """Cellwise source f(t), density rho and initial data h_p (cells), h_v (edges)."""

    f: Callable[[float], np.ndarray]
    rho: np.ndarray
    h_p: np.ndarray
    h_v: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.rho) <= 0):
            raise ConfigurationError("density must be positive")


def corner_source(nx: int, ny: int, rho: float = 1.0) -> SourceSpec:
    """f = 1 on [0, 0.1]^2, f = -1 on [0.9, 1]^2 (cell-centre test), zero initial data."""
    fine = FineGrid(nx, ny)
    x, y = fine.cell_centers.T
    f = np.zeros(fine.n_cells)
    f[(x <= 0.1) & (y <= 0.1)] = 1.0
    f[(x >= 0.9) & (y >= 0.9)] = -1.0
    f.setflags(write=False)
    return SourceSpec(
        f=lambda t: f,
        rho=np.full(fine.n_cells, float(rho)),
        h_p=np.zeros(fine.n_cells),
        h_v=np.zeros(fine.n_edges),
    )


def zero_source(fine: FineGrid, h_p: np.ndarray, rho=1.0) -> SourceSpec:
    zero = np.zeros(fine.n_cells)
    return SourceSpec(
        f=lambda t: zero,
        rho=np.broadcast_to(np.asarray(rho, dtype=float), (fine.n_cells,)).copy(),
        h_p=np.asarray(h_p, dtype=float),
        h_v=np.zeros(fine.n_edges),
    )
