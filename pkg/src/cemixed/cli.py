"""Command line driver for single runs and parameter sweeps."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .cem import NumericalError
from .experiment import ExperimentError, make_config, parse_sweep, read_config_file, run_sweep
from .grid import ConfigurationError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cemixed",
        description="Mixed CEM-GMsFEM for parabolic Darcy flow: single runs and sweeps.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="flat 'key = value' config file; flags override it")
    p.add_argument("--field", help="channelized | uniform | raster:PATH")
    p.add_argument("--channels", type=int, help="number of channel features")
    p.add_argument("--contrast", type=float, help="channel/background permeability ratio")
    p.add_argument("--seed", type=int)
    p.add_argument("--invert", action="store_true", default=None, help="use 1/kappa")
    p.add_argument("--nx", type=int, help="fine cells in x")
    p.add_argument("--ny", type=int, help="fine cells in y (defaults to nx)")
    p.add_argument("--Nx", type=int, help="coarse elements in x")
    p.add_argument("--Ny", type=int, help="coarse elements in y (defaults to Nx)")
    p.add_argument("--Lz", type=int, help="auxiliary basis functions per element")
    p.add_argument("--layers", help="oversampling layers, integer or 'auto'")
    p.add_argument("--tau", type=float, help="time step")
    p.add_argument("--T", type=float, help="final time")
    p.add_argument("--rho", type=float)
    p.add_argument("--out", help="output directory")
    p.add_argument(
        "--sweep", action="append", help="one of Lz=..., layers=..., H=1/5,1/10 (or Nx=5,10)"
    )
    p.add_argument("--workers", type=int)
    p.add_argument("--cache", help="directory for cached element spectra")
    p.add_argument("--snapshots", help="comma separated time steps to save")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args: argparse.Namespace):
    values = read_config_file(args.config) if args.config else {}
    for key in (
        "channels", "contrast", "seed", "invert", "nx", "ny", "Nx", "Ny", "Lz",
        "layers", "tau", "T", "rho", "out", "workers", "cache", "snapshots",
    ):
        value = getattr(args, key)
        if value is not None:
            values[key] = value
    if args.sweep:
        sweeps = [parse_sweep(s) for s in args.sweep]
        merged = {k: v for d in sweeps for k, v in d.items()}
        if len(merged) < len(sweeps) or len(merged) > 1:
            raise ConfigurationError(f"conflicting sweeps: {args.sweep}")
        values["sweep"] = merged
    if args.field is not None:
        kind, _, path = args.field.partition(":")
        values["field"] = kind
        if path:
            values["raster"] = path
    elif "field" in values and values["field"].startswith("raster:"):
        values["raster"] = values["field"].partition(":")[2]
        values["field"] = "raster"
    return make_config(values)


def _report(result) -> None:
    from .experiment import SweepReport

    if isinstance(result, SweepReport):
        print("param,value,e_v_T,e_p_T,order_v,order_p")
        for r in result.rows:
            ov = "" if r["order_v"] is None else f"{r['order_v']:.3f}"
            op = "" if r["order_p"] is None else f"{r['order_p']:.3f}"
            print(f"{result.param},{r['value']},{r['e_v_T']:.6e},{r['e_p_T']:.6e},{ov},{op}")
    else:
        ev, ep = result.errors.terminal
        print(f"layers={result.layers} Lambda={result.Lambda:.6g} e_v(T)={ev:.6e} e_p(T)={ep:.6e}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = config_from_args(args)
        result = run_sweep(cfg)
    except (ConfigurationError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentError as exc:
        if isinstance(exc.cause, ConfigurationError):
            print(f"configuration error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if isinstance(exc.cause, NumericalError):
            print(f"numerical error: {exc}", file=sys.stderr)
            return EXIT_NUMERICAL
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    _report(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
