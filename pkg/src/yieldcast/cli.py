"""Batch command-line interface driving the full pipeline from a config file.

Subcommands: prepare | tune | oob | ensemble | forecast | evaluate |
interpret | simulate. Exit status is 0 on success; module errors print one
diagnostic line on stderr and exit nonzero.
"""

import argparse
import dataclasses
import sys

from . import pipeline
from .config import load_config

_COMMANDS = {
    "simulate": pipeline.cmd_simulate,
    "prepare": pipeline.cmd_prepare,
    "tune": pipeline.cmd_tune,
    "oob": pipeline.cmd_oob,
    "ensemble": pipeline.cmd_ensemble,
    "forecast": pipeline.cmd_forecast,
    "evaluate": pipeline.cmd_evaluate,
    "interpret": pipeline.cmd_interpret,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="yieldcast",
        description="Ensemble yield forecasting pipeline (batch, file-driven).",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in _COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", required=True, help="path to the YAML run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=None, help="cap worker threads (does not change results)")
        p.add_argument(
            "--cutoff", default=None,
            help="weather cutoff week (1..52) or preset (june1,july1,aug1,sep1,oct1)",
        )
        p.add_argument(
            "--compat-paper-preprocessing", action="store_true",
            help="preprocess once on the full training set instead of per fold",
        )
    return parser


def _apply_overrides(cfg, args):
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        updates["threads"] = args.threads
    if args.cutoff is not None:
        cutoff = args.cutoff
        if cutoff.isdigit():
            cutoff = int(cutoff)
        updates["weather_cutoff"] = cutoff
    if args.compat_paper_preprocessing:
        updates["compat_paper_preprocessing"] = True
    return dataclasses.replace(cfg, **updates) if updates else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        written = _COMMANDS[args.command](cfg)
    except Exception as exc:  # one diagnostic line, nonzero exit
        print(f"yieldcast {args.command}: error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
