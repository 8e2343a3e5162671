"""Command-line entry point.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .harness import (OUTPUT_DIR_ENV, ConfigError, ExperimentConfig, SchemaError, compare, run_experiment,
                      write_csv)
from .ntk import residual_curve, rounds_to_tolerance, warm_start_system

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser():
    parser = _Parser(prog="fedistill", description="Federated distillation experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("config", type=Path)
    run.add_argument("--output-dir", help=f"overrides the config and ${OUTPUT_DIR_ENV}")

    ntk = sub.add_parser("analyze-ntk", help="co-distillation convergence in the kernel regime")
    ntk.add_argument("--workers", type=int, nargs="+", default=[2, 5, 100])
    ntk.add_argument("--n", type=int, default=500)
    ntk.add_argument("--a", type=float, default=1.0)
    ntk.add_argument("--lam", type=float, default=4.0)
    ntk.add_argument("--noise", type=float, default=1.0)
    ntk.add_argument("--tol", type=float, default=1e-4)
    ntk.add_argument("--seed", type=int, default=0)
    ntk.add_argument("--r-max", type=int, default=200, help="rounds to iterate for the residual CSV")
    ntk.add_argument("--output", type=Path, help="per-round residual CSV (workers, round, worker, residual)")

    frd = sub.add_parser("frd", help="distributed reinforcement learning run")
    frd.add_argument("--scheme", choices=["pd", "frd", "frl"], default="frd")
    frd.add_argument("--agents", type=int, default=2)
    frd.add_argument("--episodes", type=int, default=500)
    frd.add_argument("--S", type=int, default=10)
    frd.add_argument("--interval", type=int, default=25)
    frd.add_argument("--seed", type=int, default=0)
    frd.add_argument("--jobs", type=int, default=1)
    frd.add_argument("--output-dir", default="runs/frd")

    cmp_ = sub.add_parser("compare", help="compare two metrics.csv reports")
    cmp_.add_argument("a", type=Path)
    cmp_.add_argument("b", type=Path)
    cmp_.add_argument("--thresholds", type=float, nargs="+", default=[0.5, 0.8, 0.9, 0.95])
    return parser


def _cmd_run(args):
    cfg = ExperimentConfig.from_json(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    result = run_experiment(cfg)
    for f in result.files:
        print(f)


def _cmd_ntk(args):
    y = (np.arange(args.n) % 10).astype(np.float64)
    rows = []
    for C in args.workers:
        sys_ = warm_start_system(y, C, args.a, args.lam, args.noise, args.seed)
        print(f"C={C:<5d} rounds to {args.tol:g}: {rounds_to_tolerance(sys_, args.tol)}")
        curve = residual_curve(sys_, args.r_max)
        rows.extend({"workers": C, "round": r, "worker": c, "residual": curve[r, c]}
                    for r in range(curve.shape[0]) for c in range(C))
    if args.output:
        write_csv(args.output, rows, ["workers", "round", "worker", "residual"])


def _cmd_frd(args):
    cfg = ExperimentConfig.from_dict({
        "scheme": args.scheme, "seed": args.seed, "output_dir": args.output_dir, "n_jobs": args.jobs,
        "drl": {"agents": args.agents, "episodes": args.episodes, "S": args.S, "interval": args.interval},
    })
    result = run_experiment(cfg)
    for f in result.files:
        print(f)


def _cmd_compare(args):
    print(compare(args.a, args.b, args.thresholds).format())


COMMANDS = {"run": _cmd_run, "analyze-ntk": _cmd_ntk, "frd": _cmd_frd, "compare": _cmd_compare}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    try:
        COMMANDS[args.command](args)
    except (ConfigError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # surfaced as a runtime failure, not a traceback
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
