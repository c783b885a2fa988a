"""Command line entry point ``pobstop``.

Exit status: 0 on success, 1 on usage or configuration errors, 2 on
numerical failures (filter collapse, unstable PDE step, non-finite values).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from ..pde import PDEStabilityError
from ..pfilter import FilterCollapseError
from . import experiments as ex
from .config import _PARAM_KEYS, ALGOS, BASES, FORMATS, MODELS, ExperimentConfig, load_config
from .io import ResultTable, render, write_table

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat TOML config file")
    p.add_argument("--seed", type=int, help="master seed (nonnegative integer)")
    p.add_argument("--out", type=Path, help="output directory (default: print to stdout)")
    p.add_argument("--paths", type=int, help="number of observation paths N")
    p.add_argument("--particles", type=int, help="particles per path n")
    p.add_argument("--dt", type=float, help="exercise spacing")
    p.add_argument("--algo", choices=ALGOS, help="backward recursion")
    p.add_argument("--format", choices=FORMATS, help="output format (default json)")
    p.add_argument("--timing", action="store_true", help="include wall-clock runtime in the output")
    g = p.add_argument_group("other configuration keys")
    for name, kw in _KEY_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, **kw)
    for name in sorted(_PARAM_KEYS - {"T"}):
        g.add_argument("--" + name.replace("_", "-"), dest="cfg_" + name, type=float, metavar="X", help="model parameter")


# every config key not covered above gets a flag of the same name
_KEY_FLAGS = {
    "model": dict(choices=MODELS),
    "x0_law": dict(metavar="LAW", help="gaussian, dirac, uniform or two-point"),
    "x0_params": dict(type=float, nargs="+", metavar="X"),
    "y0": dict(type=float, metavar="X"),
    "T": dict(type=float, metavar="X", help="horizon"),
    "delta": dict(type=float, metavar="X", help="observation interval"),
    "substeps": dict(type=int, metavar="K", help="Euler steps per observation interval (0: auto)"),
    "basis": dict(choices=BASES),
    "eur_order": dict(type=int, metavar="K"),
    "european_paths": dict(type=int, metavar="K"),
    "pde_n1": dict(type=int, metavar="K"),
    "pde_n2": dict(type=int, metavar="K"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pobstop", description="Optimal stopping under partial observation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("price", help="run a single config with its solver (mc, pde or european)")
    _common(p)
    p.add_argument("--solver", choices=("mc", "pde", "european"))
    p = sub.add_parser("table1", help="linear-Gaussian benchmark table")
    _common(p)
    p.add_argument("--rows", nargs="+", metavar="LABEL", help="subset of row labels")
    p.add_argument("--no-pde", action="store_true", help="skip the PDE column")
    p = sub.add_parser("table2", help="Stein-Stein benchmark table")
    _common(p)
    p = sub.add_parser("converge", help="particle filter RMSE against the Kalman filter")
    _common(p)
    p.add_argument("--n-list", type=int, nargs="+", default=[50, 100, 200, 400, 800, 1600])
    p = sub.add_parser("region", help="export stop/continue decisions next to the PDE region")
    _common(p)
    p.add_argument("--t", type=float, default=0.5, help="exercise date to export")
    return parser


def _config(args, base: ExperimentConfig) -> ExperimentConfig:
    if args.config is not None:
        base = load_config(args.config, base)
    over = {"seed": args.seed, "paths": args.paths, "particles": args.particles, "dt": args.dt,
            "algo": args.algo, "format": args.format}
    if args.out is not None:
        over["out"] = str(args.out)
    over.update({k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None})
    if getattr(args, "solver", None):
        over["solver"] = args.solver
    return base.with_overrides(**over)


def _emit(table: ResultTable, cfg: ExperimentConfig, args) -> None:
    if cfg.out:
        path = write_table(table, cfg.out, cfg.format, args.timing)
        print(f"wrote {path}", file=sys.stderr)
    else:
        sys.stdout.write(render(table, cfg.format, args.timing))


def _run(args) -> None:
    cmd = args.command
    if cmd == "price":
        cfg = _config(args, ExperimentConfig())
        _emit(ex.price(cfg), cfg, args)
    elif cmd == "table1":
        cfg = _config(args, ExperimentConfig())
        if args.rows:
            known = [r[0] for r in ex.TABLE1_ROWS]
            bad = [r for r in args.rows if r not in known]
            if bad:
                raise UsageError(f"unknown table1 rows {bad}; choose from {known}")
        _emit(ex.run_table1(cfg, rows=args.rows, pde_solver=not args.no_pde), cfg, args)
    elif cmd == "table2":
        cfg = _config(args, ex.table2_base())
        dts = (cfg.dt,) if args.dt is not None else ex.TABLE2_DTS
        _emit(ex.run_table2(cfg, dts=dts), cfg, args)
    elif cmd == "converge":
        cfg = _config(args, ExperimentConfig(paths=200, seed=3))
        _emit(ex.run_convergence_study(args.n_list, trials=cfg.paths, cfg=cfg).to_table(), cfg, args)
    elif cmd == "region":
        cfg = _config(args, ExperimentConfig())
        report = ex.export_stopping_region(cfg, args.t, cfg.out)
        _emit(ex.region_table(report, cfg), cfg, args)
    else:  # pragma: no cover - argparse enforces the choices
        raise UsageError(f"unknown command {cmd!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _run(args)
    except (FilterCollapseError, PDEStabilityError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
