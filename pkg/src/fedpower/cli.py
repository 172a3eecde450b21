# File: src/fedpower/cli.py
"""
Command-line interface entry point.

Resolves the experiment configuration (defaults, desk scale, YAML file,
flags), configures logging and dispatches to the experiment runners.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import typing
from pathlib import Path
from typing import Any

from . import __version__
from .config import DESK_SCALE, ExperimentConfig, load_config_file
from .errors import FedPowerError
from .experiments import (
    SIZE_SWEEP_POLICIES,
    run_eval,
    run_fl,
    run_interference_sweep,
    run_pmax_sweep,
    run_size_sweep,
    run_train,
)

__all__ = ["run", "main", "build_parser", "resolve_config"]

logger = logging.getLogger(__name__)

# Subcommand -> (experiment kind, help text).
SUBCOMMANDS: dict[str, tuple[str, str]] = {
    "train": ("train", "Train the selected learned policy for every seed."),
    "eval": ("eval", "Evaluate the selected policy on the test channels."),
    "sweep-interference": ("interference_sweep", "Weighted PER versus interference scale."),
    "sweep-pmax": ("pmax_sweep", "Weighted PER versus power budget."),
    "sweep-size": ("size_sweep", "Weighted PER versus number of workers."),
    "fl-run": ("fl_run", "Federated learning error versus round."),
}

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("experiment configuration")
    hints = ExperimentConfig.field_types()
    for f in dataclasses.fields(ExperimentConfig):
        if f.name == "experiment":
            continue
        flag = "--" + f.name.replace("_", "-")
        hint = hints[f.name]
        if hint is bool:
            group.add_argument(
                flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None
            )
        elif typing.get_origin(hint) is tuple:
            group.add_argument(flag, dest=f.name, nargs="+", default=None, metavar="V")
        else:
            group.add_argument(flag, dest=f.name, default=None, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedpower",
        description="Power allocation for federated learning over wireless uplinks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, text) in SUBCOMMANDS.items():
        sub = subparsers.add_parser(name, help=text, description=text)
        sub.add_argument("--config", type=Path, help="Flat YAML file of config keys.")
        sub.add_argument(
            "--full-scale",
            "--paper-scale",
            dest="full_scale",
            action="store_true",
            help="Use full channel counts and epochs instead of the desk scale.",
        )
        sub.add_argument("--log-level", default="WARNING", help="Logging level.")
        sub.add_argument(
            "-v", "--verbose", action="store_true", help="Shorthand for --log-level INFO."
        )
        _add_config_flags(sub)
    return parser


def resolve_config(args: argparse.Namespace) -> tuple[ExperimentConfig, set[str]]:
    """Merge defaults < desk scale < explicit flags < config file.

    A key set both by a flag and in the ``--config`` file takes the file's
    value. Returns the validated config and the keys the user set explicitly.
    """
    experiment = SUBCOMMANDS[args.command][0]
    config = ExperimentConfig(experiment=experiment)
    if not args.full_scale:
        config = ExperimentConfig.from_mapping(DESK_SCALE, config)
    flags: dict[str, Any] = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(ExperimentConfig)
        if f.name != "experiment" and getattr(args, f.name, None) is not None
    }
    config = ExperimentConfig.from_mapping(flags, config)
    explicit = set(flags)
    if args.config is not None:
        values = load_config_file(args.config)
        values.pop("experiment", None)
        config = ExperimentConfig.from_mapping(values, config)
        explicit |= {k.replace("-", "_") for k in values}
    return config.validate(), explicit


def _configure_logging(args: argparse.Namespace) -> None:
    level = "INFO" if args.verbose else str(args.log_level).upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _dispatch(config: ExperimentConfig, explicit: set[str]) -> list[Path]:
    kind = config.experiment
    if kind == "train":
        return [run_train(config)]
    if kind == "eval":
        return list(run_eval(config))
    if kind == "interference_sweep":
        return [run_interference_sweep(config)]
    if kind == "pmax_sweep":
        return [run_pmax_sweep(config)]
    if kind == "size_sweep":
        policies = None if "policies" in explicit else SIZE_SWEEP_POLICIES
        return [run_size_sweep(config, policies)]
    return [run_fl(config)]


def run(argv: list[str] | None = None) -> int:
    """Executes the CLI application.

    Args:
        argv: List of command-line arguments. Defaults to None (uses sys.argv).

    Returns:
        0 on success, 1 on a configuration, data or numerical error.
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 1

    try:
        _configure_logging(args)
    except ValueError as exc:
        print(f"error: invalid log level {args.log_level!r}: {exc}", file=sys.stderr)
        return 1

    try:
        config, explicit = resolve_config(args)
        run_dir = Path(config.run_dir)
        config.snapshot(run_dir / "config.yaml")
        written = _dispatch(config, explicit)
    except (FedPowerError, OSError) as exc:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1

    for path in written:
        print(f"wrote {path}")
    return 0


def main() -> None:
    sys.exit(run(sys.argv[1:]))
