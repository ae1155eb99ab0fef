"""Experiment configuration, the end-to-end pipeline and parameter sweeps."""

from __future__ import annotations

import contextlib
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from dataclasses import field as dc_field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .cem import CemBasis, NumericalError, auto_layers, build_velocity_space
from .fields import (
    PermeabilityField,
    contrast,
    generate_channelized,
    invert_field,
    load_raster,
    corner_source,
    uniform_field,
)
from .grid import ConfigurationError, build_coarse_partition, build_fine_grid
from .metrics import ErrorSeries, error_series
from .pou import compute_kappa_tilde, solve_pou
from .solver import (
    FineOperators,
    Trajectory,
    assemble_reduced,
    backward_euler,
    prolongate,
    solve_fine_reference,
)
from .spectral import ElementSpectrum, select_basis, solve_all_spectral

SWEEPABLE = ("Lz", "layers", "H")


class ExperimentError(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage
        self.cause = exc


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except ExperimentError:
        raise
    except (ConfigurationError, NumericalError, ValueError, RuntimeError, OSError) as exc:
        raise ExperimentError(name, exc) from exc


@dataclass
class ExperimentConfig:
    field: str = "channelized"  # channelized | uniform | raster
    channels: int = 12
    contrast: float = 1e4
    seed: int = 0
    raster: str | None = None
    invert: bool = False
    nx: int = 40
    ny: int | None = None
    Nx: int = 5
    Ny: int | None = None
    Lz: int = 2
    layers: int | str = "auto"
    tau: float = 1e-2
    T: float = 1.0
    rho: float = 1.0
    source: str = "corners"
    out: str | None = None
    sweep: dict = dc_field(default_factory=dict)
    workers: int = 1
    cache: str | None = None
    snapshots: tuple[int, ...] = ()

    def __post_init__(self):
        self.ny = self.nx if self.ny is None else self.ny
        self.Ny = self.Nx if self.Ny is None else self.Ny
        self.validate()

    def validate(self):
        if self.field not in ("channelized", "uniform", "raster"):
            raise ConfigurationError(f"unknown field kind {self.field!r}")
        if self.field == "raster" and not self.raster:
            raise ConfigurationError("raster field needs a path")
        if self.source != "corners":
            raise ConfigurationError(f"unknown source {self.source!r}")
        if self.nx % self.Nx or self.ny % self.Ny:
            raise ConfigurationError(f"coarse {self.Nx}x{self.Ny} does not divide fine {self.nx}x{self.ny}")
        if self.Lz < 1:
            raise ConfigurationError("Lz must be >= 1")
        if self.layers != "auto" and int(self.layers) < 0:
            raise ConfigurationError("layers must be >= 0 or 'auto'")
        if self.rho <= 0:
            raise ConfigurationError("rho must be positive")
        if len(self.sweep) > 1:
            raise ConfigurationError(f"conflicting sweeps over {sorted(self.sweep)}; sweep one parameter")
        for key, values in self.sweep.items():
            if key not in SWEEPABLE:
                raise ConfigurationError(f"cannot sweep {key!r}; choose from {SWEEPABLE}")
            if not values:
                raise ConfigurationError(f"empty sweep list for {key}")

    def echo(self) -> dict:
        d = asdict(self)
        d["snapshots"] = list(self.snapshots)
        d["sweep"] = {k: [str(v) for v in vals] for k, vals in self.sweep.items()}
        return d


_INT_KEYS = {"channels", "seed", "nx", "ny", "Nx", "Ny", "Lz", "workers"}
_FLOAT_KEYS = {"contrast", "tau", "T", "rho"}


def _coerce(key: str, value: str):
    if key in _INT_KEYS:
        return int(value)
    if key in _FLOAT_KEYS:
        return float(value)
    if key == "layers":
        return value if value == "auto" else int(value)
    if key == "invert":
        return value.lower() in ("1", "true", "yes", "on")
    if key == "sweep":
        return parse_sweep(value)
    if key == "snapshots":
        return tuple(int(v) for v in value.replace(",", " ").split())
    if key in ("field", "raster", "source", "out", "cache"):
        return value
    raise ConfigurationError(f"unknown config key {key!r}")


def parse_sweep(text: str) -> dict:
    """``"Lz=1,2,3"``, ``"layers=1,2"``, ``"H=1/5,1/10"`` (or ``"Nx=5,10"``)."""
    if not text:
        return {}
    if "=" not in text:
        raise ConfigurationError(f"sweep must look like 'param=v1,v2', got {text!r}")
    key, _, values = text.partition("=")
    key = key.strip()
    items = [v.strip() for v in values.split(",") if v.strip()]
    if key == "Nx":
        key, items = "H", [f"1/{v}" for v in items]
    if key == "H":
        parsed = [Fraction(v) for v in items]
        if any(h <= 0 or h.numerator != 1 for h in parsed):
            raise ConfigurationError("H sweep values must be reciprocals of integers, e.g. 1/10")
    elif key in ("Lz", "layers"):
        parsed = [int(v) for v in items]
    else:
        raise ConfigurationError(f"cannot sweep {key!r}")
    return {key: parsed}


def read_config_file(path) -> dict:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def make_config(values: dict) -> ExperimentConfig:
    kwargs = {}
    for key, value in values.items():
        kwargs[key] = _coerce(key, value) if isinstance(value, str) else value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def build_field(cfg: ExperimentConfig) -> PermeabilityField:
    if cfg.field == "channelized":
        k = generate_channelized(cfg.nx, cfg.ny, cfg.channels, cfg.contrast, cfg.seed)
    elif cfg.field == "uniform":
        k = uniform_field(cfg.nx, cfg.ny)
    else:
        k = load_raster(cfg.raster)
        if (k.nx, k.ny) != (cfg.nx, cfg.ny):
            raise ConfigurationError(f"raster is {k.nx}x{k.ny} but config asks for {cfg.nx}x{cfg.ny}")
    return invert_field(k) if cfg.invert else k


def resolve_layers(cfg: ExperimentConfig, kappa: PermeabilityField, part) -> int:
    if cfg.layers == "auto":
        return auto_layers(contrast(kappa), part.H, part.max_layers)
    return int(cfg.layers)


@dataclass
class Multiscale:
    """Everything produced offline for one (field, coarse grid, Lz, layers)."""

    part: object
    kappa_tilde: np.ndarray
    spectral: object
    cem: CemBasis
    layers: int


def _spectral_cached(cfg, fine, part, kappa, kt) -> list[ElementSpectrum]:
    if not cfg.cache:
        return solve_all_spectral(fine, part, kappa, kt, workers=cfg.workers)
    path = Path(cfg.cache) / f"spectra_{kappa.digest()}_{part.Nx}x{part.Ny}.npz"
    if path.exists():
        data = np.load(path)
        return [
            ElementSpectrum(part, e, part.element_cells[e], data[f"lam{e}"], data[f"vec{e}"], data[f"w{e}"])
            for e in range(part.n_elements)
        ]
    spectra = solve_all_spectral(fine, part, kappa, kt, workers=cfg.workers)
    payload = {}
    for s in spectra:
        payload.update({f"lam{s.element}": s.eigenvalues, f"vec{s.element}": s.eigenvectors, f"w{s.element}": s.weights})
    _atomic(path, lambda tmp: np.savez(tmp, **payload), suffix=".npz")
    return spectra


def build_multiscale(cfg: ExperimentConfig, fine, kappa: PermeabilityField) -> Multiscale:
    with _stage("grid"):
        part = build_coarse_partition(fine, cfg.Nx, cfg.Ny)
        layers = resolve_layers(cfg, kappa, part)
    with _stage("pou"):
        kt = compute_kappa_tilde(kappa, solve_pou(fine, part, kappa))
    with _stage("spectral"):
        spectral = select_basis(_spectral_cached(cfg, fine, part, kappa, kt), cfg.Lz)
    with _stage("cem"):
        cem = build_velocity_space(fine, kappa, spectral, layers, workers=cfg.workers)
    return Multiscale(part, kt, spectral, cem, layers)


def _atomic(path: Path, write, suffix=""):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=suffix)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


@dataclass
class RunResult:
    errors: ErrorSeries
    layers: int
    Lambda: float
    reference: Trajectory
    multiscale: Trajectory
    artifacts: dict = dc_field(default_factory=dict)


def _reference(cfg: ExperimentConfig):
    with _stage("fields"):
        fine = build_fine_grid(cfg.nx, cfg.ny)
        kappa = build_field(cfg)
        source = corner_source(cfg.nx, cfg.ny, cfg.rho)
        ops = FineOperators.build(fine, kappa, source.rho)
    with _stage("reference"):
        ref = solve_fine_reference(ops, source, cfg.tau, cfg.T)
    return fine, kappa, source, ops, ref


def _run_point(cfg, fine, kappa, source, ops, ref) -> RunResult:
    ms = build_multiscale(cfg, fine, kappa)
    with _stage("solver"):
        system = assemble_reduced(ops, ms.cem, ms.spectral)
        traj = backward_euler(system, source, cfg.tau, cfg.T)
        fine_traj = prolongate(system, traj)
    with _stage("metrics"):
        echo = {
            "Lz": cfg.Lz,
            "layers": ms.layers,
            "H": ms.part.H,
            "field": kappa.digest(),
            "tau": cfg.tau,
            "T": cfg.T,
        }
        errors = error_series(ref, fine_traj, fine, kappa, echo)
    result = RunResult(errors, ms.layers, ms.spectral.Lambda, ref, fine_traj)
    if cfg.out:
        with _stage("output"):
            _write_point(cfg, result, kappa)
    return result


def _write_point(cfg, result: RunResult, kappa):
    out = Path(cfg.out)
    csv = out / "errors.csv"
    _atomic(csv, result.errors.to_csv, suffix=".csv")
    meta = {
        "version": __version__,
        "config": cfg.echo(),
        "layers_used": result.layers,
        "field_digest": kappa.digest(),
        "contrast": contrast(kappa),
        "Lambda": result.Lambda,
        "terminal": {"e_v": result.errors.terminal[0], "e_p": result.errors.terminal[1]},
    }
    _atomic(out / "run.json", lambda tmp: Path(tmp).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n"))
    result.artifacts = {"errors": str(csv), "meta": str(out / "run.json")}
    if cfg.snapshots:
        for traj, name in ((result.reference, "reference"), (result.multiscale, "multiscale")):
            path = out / f"snapshots_{name}.npz"
            _atomic(path, lambda tmp, t=traj: t.save_snapshots(tmp, cfg.snapshots), suffix=".npz")
            result.artifacts[f"snapshots_{name}"] = str(path)


def run_single(cfg: ExperimentConfig) -> RunResult:
    fine, kappa, source, ops, ref = _reference(cfg)
    return _run_point(cfg, fine, kappa, source, ops, ref)


@dataclass
class SweepReport:
    param: str
    values: list
    results: list[RunResult]
    rows: list[dict]

    def write(self, out) -> None:
        out = Path(out)

        def long_csv(tmp):
            with open(tmp, "w", newline="") as fh:
                fh.write("sweep_value,t,e_v,e_p\n")
                for value, res in zip(self.values, self.results):
                    e = res.errors
                    for n in np.flatnonzero(e.defined()):
                        fh.write(f"{value},{float(e.times[n])!r},{float(e.e_v[n])!r},{float(e.e_p[n])!r}\n")

        def summary_csv(tmp):
            with open(tmp, "w", newline="") as fh:
                fh.write("param,value,e_v_T,e_p_T,order_v,order_p\n")
                for r in self.rows:
                    fh.write(
                        f"{self.param},{r['value']},{r['e_v_T']!r},{r['e_p_T']!r},"
                        f"{_fmt(r['order_v'])},{_fmt(r['order_p'])}\n"
                    )

        _atomic(out / "sweep_errors.csv", long_csv, suffix=".csv")
        _atomic(out / "sweep_summary.csv", summary_csv, suffix=".csv")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def observed_orders(H: list[float], errors: list[float]) -> list[float | None]:
    """log(e_k / e_{k+1}) / log(H_k / H_{k+1}) for consecutive entries (None for the first)."""
    out: list[float | None] = [None]
    for k in range(1, len(H)):
        if errors[k] > 0 and errors[k - 1] > 0:
            out.append(math.log(errors[k - 1] / errors[k]) / math.log(H[k - 1] / H[k]))
        else:
            out.append(None)
    return out


def _point_config(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    out = None if cfg.out is None else str(Path(cfg.out) / f"{param}_{str(value).replace('/', '_')}")
    if param == "H":
        n = int(1 / value)
        return replace(cfg, Nx=n, Ny=n, sweep={}, out=out)
    return replace(cfg, **{param: value}, sweep={}, out=out)


def run_sweep(cfg: ExperimentConfig) -> SweepReport | RunResult:
    if not cfg.sweep:
        return run_single(cfg)
    (param, values), = cfg.sweep.items()
    if len(values) == 1:
        return run_single(_point_config(cfg, param, values[0]))
    fine, kappa, source, ops, ref = _reference(cfg)
    configs = [_point_config(cfg, param, v) for v in values]

    def work(c):
        return _run_point(c, fine, kappa, source, ops, ref)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(work, configs))
    else:
        results = [work(c) for c in configs]
    ev = [r.errors.terminal[0] for r in results]
    ep = [r.errors.terminal[1] for r in results]
    if param == "H":
        hs = [float(v) for v in values]
        ov, op = observed_orders(hs, ev), observed_orders(hs, ep)
    else:
        ov = op = [None] * len(values)
    rows = [
        {"value": str(v), "e_v_T": ev[k], "e_p_T": ep[k], "order_v": ov[k], "order_p": op[k]}
        for k, v in enumerate(values)
    ]
    report = SweepReport(param, [str(v) for v in values], results, rows)
    if cfg.out:
        with _stage("output"):
            report.write(cfg.out)
    return report
