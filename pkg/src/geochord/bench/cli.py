"""Command line entry point: ``sim run``, ``sim compare`` and ``sim list``."""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from ..errors import GeoChordError
from ..nettest.config import SimConfig, load_config
from .checks import run_checks
from .experiments import EXPERIMENTS, Experiment, run_experiment
from .report import MetricsReport, compare_report

OUT_DIR_ENV = "GEOCHORD_OUT_DIR"


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sim", description="Hierarchical geographic overlay simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment and print its report")
    run.add_argument("--experiment", required=True, help=", ".join(EXPERIMENTS))
    run.add_argument("--config", type=Path, help="key = value (or JSON) config file")
    run.add_argument("--nodes", type=int)
    run.add_argument("--k", type=int)
    run.add_argument("--height", type=int)
    run.add_argument("--neighborhood", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", choices=("csv", "json"), default="csv")
    run.add_argument("--trace", action="store_true", help="also emit per-hop route or per-cycle convergence traces")
    run.add_argument("--check", action="store_true", help="exit 2 when a declared tolerance fails")
    run.add_argument("--reps", type=int, default=1, help="repetitions, seeds seed..seed+reps-1")
    run.add_argument("--sweep-nodes", type=_ints, help="comma-separated node counts")
    run.add_argument("--pairs", type=int, help="random pairs per measurement")
    run.add_argument("--epochs", type=int)
    run.add_argument("--fractions", type=_floats, help="failure fractions for the churn experiment")

    cmp_ = sub.add_parser("compare", help="diff two JSON reports")
    cmp_.add_argument("a", type=Path)
    cmp_.add_argument("b", type=Path)
    cmp_.add_argument("--tolerance", type=float, default=0.0)
    cmp_.add_argument("--sigmas", type=float)

    sub.add_parser("list", help="list experiments")
    return parser


def _options(args) -> dict:
    opts = {}
    if args.sweep_nodes:
        opts["nodes"] = args.sweep_nodes
    if args.pairs is not None:
        opts["pairs"] = args.pairs
        opts["lookups"] = args.pairs
    if args.epochs is not None:
        opts["epochs"] = args.epochs
    if args.fractions:
        opts["fractions"] = args.fractions
    return opts


def _emit(name: str, text: str, out_dir: str | None) -> None:
    if out_dir:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / name).write_text(text)


def cmd_run(args) -> int:
    config = load_config(args.config) if args.config else SimConfig()
    config = config.with_overrides(nodes=args.nodes, k=args.k, height=args.height, neighborhood=args.neighborhood, seed=args.seed)
    exp = Experiment(args.experiment, repetitions=args.reps, options=_options(args))
    traces: list[str] | None = [] if args.trace else None
    report = run_experiment(config, exp, traces=traces)
    text = report.to_csv() if args.out == "csv" else report.to_json()
    sys.stdout.write(text)
    out_dir = os.environ.get(OUT_DIR_ENV)
    _emit(f"{args.experiment}.{args.out}", text, out_dir)
    if traces:
        trace = "".join(traces)
        if out_dir:
            _emit(f"{args.experiment}-trace.csv", trace, out_dir)
        else:
            sys.stderr.write(trace)
    if args.check:
        results = run_checks(report)
        for desc, ok in results:
            print(f"{'PASS' if ok else 'FAIL'} {desc}", file=sys.stderr)
        if not all(ok for _, ok in results):
            return 2
    return 0


def cmd_compare(args) -> int:
    a = MetricsReport.from_json(args.a.read_text())
    b = MetricsReport.from_json(args.b.read_text())
    result = compare_report(a, b, default_tolerance=args.tolerance, sigmas=args.sigmas)
    sys.stdout.write(result.summary())
    return 0 if result.passed else 2


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "list":
            print("\n".join(EXPERIMENTS))
            return 0
        if args.command == "compare":
            return cmd_compare(args)
        return cmd_run(args)
    except (GeoChordError, ValueError, OSError) as exc:
        print(f"sim: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
