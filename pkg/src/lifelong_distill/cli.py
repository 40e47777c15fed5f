"""Command line: gen-data, train, eval, report."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, ExperimentConfig, load_config
from .runs import (DataError, RunLocked, build_report, find_runs, format_table, generate_data, load_seed,
                   metrics_rows, recompute_seed, train_seed, write_eval_table)
from .sim import UnsolvableTaskError
from .trainer import TrainingDiverged

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_LOCKED = 5

log = logging.getLogger("lifelong_distill")


def _seed_list(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be a comma-separated list of integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lifelong-distill", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, method=True):
        sp.add_argument("--config", type=Path, help="YAML experiment config (defaults apply when omitted)")
        sp.add_argument("--out", help="output root (overrides the config)")
        sp.add_argument("--seeds", type=_seed_list, help="comma-separated seeds (overrides the config)")
        if method:
            sp.add_argument("--method", choices=["sequential", "er", "m2distill"])
        sp.add_argument("--force", action="store_true", help="redo work that is already complete")

    common(sub.add_parser("gen-data", help="generate the task suite and expert demonstrations"), method=False)
    common(sub.add_parser("train", help="train one method over the configured seeds"))

    ev = sub.add_parser("eval", help="metrics table for a finished run")
    ev.add_argument("run", type=Path, help="run directory (one seed_<s> directory or its parent)")
    ev.add_argument("--recompute", action="store_true",
                    help="re-run rollouts from saved checkpoints instead of reading logged success rates")
    ev.add_argument("--workers", type=int, default=1, help="rollout threads when recomputing")
    ev.add_argument("--out", type=Path, help="where to write the table (default <run>/eval_metrics.csv)")

    rp = sub.add_parser("report", help="compare runs and export long-format curves")
    rp.add_argument("runs", type=Path, nargs="+", help="run directories")
    rp.add_argument("--out", type=Path, required=True)
    return p


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(method=getattr(args, "method", None), seeds=args.seeds, out=args.out)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    root = generate_data(cfg, force=args.force)
    print(f"data: {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    for seed in cfg.seeds:
        out = train_seed(cfg, seed, force=args.force)
        print(f"seed {seed}: {'skipped (complete)' if out is None else out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    paths = find_runs(args.run)
    results = [recompute_seed(p, args.workers) if args.recompute else load_seed(p) for p in paths]
    rows = metrics_rows(results)
    dest = args.out or (args.run / "eval_metrics.csv")
    write_eval_table(dest, rows)
    print(format_table(rows))
    print(f"table: {dest}")
    return EXIT_OK


def cmd_report(args) -> int:
    results = [load_seed(p) for run in args.runs for p in find_runs(run)]
    paths = build_report(results, args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnsolvableTaskError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RunLocked as exc:
        print(f"locked: {exc}", file=sys.stderr)
        return EXIT_LOCKED
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
