"""Command-line interface.

Subcommands map onto pipeline stages and run every stage up to their
target (honoring --resume, so completed stages are loaded from the output
directory). Exit codes: 0 success, 2 invalid arguments/config, 3 I/O or
format problems, 4 numerical failures, 5 empty data sets, 1 anything else.
"""
from __future__ import annotations

import argparse
import logging
import sys

from ..errors import (
    DivergenceError,
    EmptyCleanSet,
    EmptyCorpus,
    FormatError,
    InvalidArgument,
    NumericalFailure,
)
from .config import ExperimentConfig
from .pipeline import SWEEP_VARIANTS, fake_order_effect_sweep, run_pipeline

COMMAND_STAGE = {
    "synth": "data",
    "inject": "inject",
    "train-target": "poisoned_model",
    "train-detector": "dualview",
    "detect": "detect",
    "influence": "influence",
    "rectify": "rectify",
    "eval": "final",
    "pipeline": "final",
}

EXIT_CODES = (
    (InvalidArgument, 2),
    ((FormatError, OSError), 3),
    ((NumericalFailure, DivergenceError), 4),
    ((EmptyCorpus, EmptyCleanSet), 5),
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orderlab",
        description="Inject, detect and rectify fake orders in a sequential recommender.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in list(COMMAND_STAGE) + ["effect-sweep"]:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="experiment config JSON (defaults used when omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory (default: ./out)")
        p.add_argument("--resume", action="store_true", help="reuse existing stage artifacts")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "effect-sweep":
            p.add_argument(
                "--variants",
                nargs="+",
                default=list(SWEEP_VARIANTS),
                choices=list(SWEEP_VARIANTS),
            )
    return parser


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = int(args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        cfg = load_config(args)
        if args.command == "effect-sweep":
            rows = fake_order_effect_sweep(cfg, args.out, tuple(args.variants), resume=args.resume)
            for row in rows:
                print(row)
        else:
            ctx = run_pipeline(cfg, args.out, resume=args.resume, stop_after=COMMAND_STAGE[args.command])
            if "metrics" in ctx:
                print(f"metrics written to {args.out}/metrics.json")
    except Exception as exc:  # noqa: BLE001 - map every family to its exit code
        for families, code in EXIT_CODES:
            if isinstance(exc, families):
                logging.error("%s: %s", type(exc).__name__, exc)
                return code
        logging.exception("unexpected failure")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
