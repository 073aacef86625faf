"""Command line entry point: ``lpsgld <experiment> [--config F] [--override k=v ...]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import EXPERIMENTS, SCHEMA, ConfigError, ExperimentConfig, load_config
from .experiments import run_experiment, write_outcome


def _schema_help() -> str:
    defaults = ExperimentConfig()
    lines = ["config keys (type, default):"]
    for key, kind in SCHEMA.items():
        lines.append(f"  {key:18s} {kind:12s} {getattr(defaults, key)!r}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lpsgld",
        description="Low-precision SGLD experiments. Results are written as CSV.",
        epilog=_schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    parser.add_argument("--out", help="output CSV path (overrides the config)")
    parser.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE",
        help="set one config key; repeatable, applied after --config",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    fixed = {"experiment": args.experiment}
    if args.seed is not None:
        fixed["seed"] = args.seed
    if args.out is not None:
        fixed["out"] = args.out
    try:
        config = load_config(args.config, args.override, **fixed)
    except (ConfigError, OSError) as exc:
        print(f"lpsgld: configuration error: {exc}", file=sys.stderr)
        return 2
    outcome = run_experiment(config)
    for path in write_outcome(outcome, config.out):
        logging.info("wrote %s", path)
    for message in outcome.aborted:
        print(f"lpsgld: {message}", file=sys.stderr)
    return 0 if outcome.ok else 1


if __name__ == "__main__":
    sys.exit(main())
