"""Command-line entry point: ``evarl run | summarize | gradcheck``."""
from __future__ import annotations

import argparse
import os
import sys

from .experiments import (
    ConfigError,
    gradient_checks,
    load_config,
    run_experiment,
    summarize,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _seed_offset() -> int:
    raw = os.environ.get("EVARL_SEED_OFFSET", "0")
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError([f"EVARL_SEED_OFFSET: expected an integer, got {raw!r}"]) from exc


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        offset = _seed_offset()
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error in {args.config}:", file=sys.stderr)
        for problem in exc.problems:
            print(f"  {problem}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or cfg.get("output") or os.path.join("runs", cfg.get("name", cfg["kind"]))
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        print(f"config error: output directory {out!r} is not creatable ({exc})", file=sys.stderr)
        return EXIT_CONFIG
    base_dir = os.path.dirname(os.path.abspath(args.config))
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    manifest = run_experiment(cfg, out, jobs=jobs, seed_offset=offset, base_dir=base_dir)
    if manifest["partial"]:
        print(f"run failed: {manifest['error']} (partial outputs in {out})", file=sys.stderr)
        return EXIT_RUNTIME
    print(summarize(out), end="")
    return EXIT_OK if manifest["ok"] else EXIT_RUNTIME


def _cmd_summarize(args) -> int:
    try:
        print(summarize(args.dir), end="")
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    rows = gradient_checks(args.tol)
    for r in rows:
        status = "ok  " if r["passed"] else "FAIL"
        print(f"{status} {r['check']:<26} max rel error {r['max_rel_error']:.2e}")
    failed = sum(1 for r in rows if not r["passed"])
    print(f"{len(rows) - failed}/{len(rows)} gradient checks passed at tolerance {args.tol:g}")
    return EXIT_OK if failed == 0 else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evarl", description="Evaluation-aware RL experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    run.add_argument("--out", default=None, help="output directory (overrides the config)")
    run.set_defaults(func=_cmd_run)
    summ = sub.add_parser("summarize", help="print a report for an output directory")
    summ.add_argument("dir")
    summ.set_defaults(func=_cmd_summarize)
    gc = sub.add_parser("gradcheck", help="finite-difference checks of all gradients")
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
