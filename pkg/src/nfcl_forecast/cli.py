"""CLI entry point for nfcl."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from nfcl_forecast import __version__, runner
from nfcl_forecast.config import (
    MODELS,
    ConfigError,
    RunConfig,
    load_config,
    project_defaults,
    validate,
)
from nfcl_forecast.interpret import FORMATS, SPACES
from nfcl_forecast.nfcl import PADDINGS
from nfcl_forecast.runner import SPLITS, StageError

_HELP = {
    "data": "CSV file: optional date column, then one numeric column per variable",
    "date_col": "Name of the date column (default: auto-detect)",
    "lookback": "Look-back length L",
    "horizon": "Forecast horizon T",
    "model": "Model variant",
    "hidden": "Hidden widths of the per-point MLPs",
    "kernels": "Decreasing moving-average kernels ending in 1 (model d)",
    "padding": "Left padding of the decomposition (model d)",
    "slope": "Negative slope of the leaky ReLU",
    "moving_avg": "Moving-average kernel (model dlinear)",
    "seeds": "One training run per seed",
    "threads": "Worker threads for batch gradients and evaluation",
    "output_dir": "Directory for checkpoints, reports and maps",
}
_CHOICES = {"model": MODELS, "padding": PADDINGS}


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-c", "--config", type=Path, help="Flat TOML run config")
    defaults = RunConfig()
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        kwargs: dict = {"dest": f.name, "default": None,
                        "help": _HELP.get(f.name, f.name.replace("_", " ").capitalize())}
        if isinstance(default, bool):
            kwargs["action"] = argparse.BooleanOptionalAction
        elif isinstance(default, list):
            kwargs.update(type=int, nargs="+", metavar="N")
        elif isinstance(default, int):
            kwargs["type"] = int
        elif isinstance(default, float):
            kwargs["type"] = float
        if f.name in _CHOICES:
            kwargs["choices"] = _CHOICES[f.name]
        parser.add_argument(flag, **kwargs)


def _add_checkpoint(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("checkpoint", type=Path, metavar="CHECKPOINT", help="Checkpoint JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfcl",
        description="Train, evaluate and explain NFCL forecasters",
    )
    parser.add_argument(
        "-V",
        "--version",
        action="version",
        version=f"%(prog)s {__version__}",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Log progress (-v) or debug details (-vv) to stderr",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    train = sub.add_parser("train", help="Train one model per seed")
    _add_run_flags(train)

    evaluate = sub.add_parser("evaluate", help="Score a checkpoint in scaled space")
    _add_checkpoint(evaluate)
    _add_run_flags(evaluate)
    evaluate.add_argument("--split", choices=[*SPLITS, "all"], default="test")
    evaluate.add_argument("-o", "--output", type=Path, help="Metrics CSV path")

    predict = sub.add_parser("predict", help="Write forecasts of one split as CSV")
    _add_checkpoint(predict)
    _add_run_flags(predict)
    predict.add_argument("--split", choices=SPLITS, default="test")
    predict.add_argument("--raw", action="store_true", help="Undo the train-fitted scaling")
    predict.add_argument("-o", "--output", type=Path, help="Predictions CSV path")

    explain = sub.add_parser("explain", help="Export contribution maps of one test window")
    _add_checkpoint(explain)
    _add_run_flags(explain)
    explain.add_argument("--sample", type=int, default=0, help="Test window index")
    explain.add_argument("--k", type=int, help="Target variable (default: all)")
    explain.add_argument("--t", type=int, help="Target step (default: all)")
    explain.add_argument("--format", dest="fmt", choices=FORMATS, default="csv")
    explain.add_argument("--space", choices=SPACES, default="normalized")
    explain.add_argument(
        "--check", action="store_true", help="Fail if a map does not sum to the prediction"
    )
    explain.add_argument(
        "--shared-scale", action="store_true", help="Use one grey scale for all PGM maps"
    )

    verify = sub.add_parser("verify", help="Run the built-in verification battery")
    verify.add_argument("--seed", type=int, default=0)
    verify.add_argument(
        "--configs", type=int, default=100, help="Random models for the gradient check"
    )

    inspect = sub.add_parser("inspect", help="Summarise a checkpoint")
    _add_checkpoint(inspect)
    return parser


def resolve_config(parsed: argparse.Namespace) -> RunConfig:
    """Config file (or [tool.nfcl] of the enclosing project), then flag overrides."""
    base = load_config(parsed.config) if parsed.config else project_defaults()
    overrides = {
        f.name: getattr(parsed, f.name)
        for f in fields(RunConfig)
        if getattr(parsed, f.name, None) is not None
    }
    return validate(replace(base, **overrides))


def _configure_logging(verbosity: int) -> None:
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(level=level, format="nfcl: %(levelname)s: %(message)s", stream=sys.stderr)


def main(argv: list[str] | None = None) -> None:
    parser = build_parser()
    parsed = parser.parse_args(argv)
    _configure_logging(parsed.verbose)

    if not parsed.command:
        parser.print_help()
        sys.exit(1)

    try:
        exit_code = _dispatch(parsed)
    except ConfigError as e:
        print(f"nfcl: config: {e}", file=sys.stderr)
        sys.exit(1)
    except StageError as e:
        print(f"nfcl: {e}", file=sys.stderr)
        sys.exit(1)
    sys.exit(exit_code)


def _dispatch(parsed: argparse.Namespace) -> int:
    if parsed.command == "verify":
        return runner.cmd_verify(seed=parsed.seed, gradient_configs=parsed.configs)
    if parsed.command == "inspect":
        runner.cmd_inspect(parsed.checkpoint)
        return 0

    cfg = resolve_config(parsed)
    if parsed.command == "train":
        runner.cmd_train(cfg)
    elif parsed.command == "evaluate":
        runner.cmd_evaluate(cfg, parsed.checkpoint, split=parsed.split, output=parsed.output)
    elif parsed.command == "predict":
        runner.cmd_predict(
            cfg, parsed.checkpoint, split=parsed.split, raw=parsed.raw, output=parsed.output
        )
    elif parsed.command == "explain":
        runner.cmd_explain(
            cfg,
            parsed.checkpoint,
            sample=parsed.sample,
            k=parsed.k,
            t=parsed.t,
            fmt=parsed.fmt,
            space=parsed.space,
            check=parsed.check,
            shared_scale=parsed.shared_scale,
        )
    return 0
