"""Command line entry point: ``coopsim {run,report,gen-scenario,validate-config}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure (any variant
or any unreadable log).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .experiment import DEFAULT_OUT, OUT_ENV, ConfigError, build_matrix, execute, load_document
from .report import write_report
from .scenario import generate_synthetic, save_scenario

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("coopsim")


def _matrix(args):
    return build_matrix(load_document(args.config), args.set, seed=args.seed, out=args.out)


def cmd_run(args) -> int:
    matrix = _matrix(args)
    log.info("running %d variants x %d seeds into %s", len(matrix.variants), len(matrix.seeds), matrix.out)
    failures = execute(matrix, jobs=args.jobs)
    for label, seed, err in failures:
        print(f"error: variant {label} seed {seed}: {err}", file=sys.stderr)
    records, errors = write_report(matrix.out)
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    if records:
        print(f"wrote {len(records)} run logs and a summary to {matrix.out}")
    return EXIT_RUNTIME if failures or errors or not records else EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.logs or args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    if not (out / "logs").is_dir():
        print(f"error: no logs directory under {out}", file=sys.stderr)
        return EXIT_RUNTIME
    records, errors = write_report(out)
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    if not records:
        print(f"error: no readable run logs under {out / 'logs'}", file=sys.stderr)
        return EXIT_RUNTIME
    print((out / "summary.txt").read_text(), end="")
    return EXIT_RUNTIME if errors else EXIT_OK


def cmd_gen_scenario(args) -> int:
    matrix = _matrix(args)
    out = matrix.out
    out.mkdir(parents=True, exist_ok=True)
    for i, seed in enumerate(matrix.seeds):
        path = out / f"scenario_{seed}.json"
        save_scenario(generate_synthetic(matrix.generator_config(i), seed), path)
        print(path)
    return EXIT_OK


def cmd_validate_config(args) -> int:
    matrix = _matrix(args)
    labels = ", ".join(label for label, _ in matrix.variants)
    print(f"ok: {len(matrix.variants)} variants ({labels}) x {len(matrix.seeds)} seeds = {len(matrix)} runs")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML (defaults to the built-in matrix)")
    common.add_argument("--seed", type=int, default=None, help="run this seed only")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("--out", default=None, help="output directory (else $COOPSIM_OUT, else ./coopsim_runs)")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override by dotted path, e.g. compression=256 or scenario.n_cavs=4 (repeatable)",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="coopsim", description="Cooperative perception and prediction simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="execute an experiment matrix and write logs + report")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("report", parents=[common], help="recompute tables from existing logs")
    p.add_argument("logs", nargs="?", help="output directory of a previous run (default: --out)")
    p.set_defaults(func=cmd_report)
    p = sub.add_parser("gen-scenario", parents=[common], help="write synthetic scenario files")
    p.set_defaults(func=cmd_gen_scenario)
    p = sub.add_parser("validate-config", parents=[common], help="check a config without running it")
    p.set_defaults(func=cmd_validate_config)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
