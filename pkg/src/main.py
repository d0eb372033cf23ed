"""Command-line entrypoint."""

from __future__ import annotations

import argparse
import logging
import os
from pathlib import Path
from typing import Any, Callable, Sequence

from . import pipeline
from .config import load_config
from .errors import LidarSphereError

_DEFAULT_CONFIG = Path("pipeline.yaml")
_LOG_ENV = "LIDARSPHERE_LOG"

_LOGGER = logging.getLogger(__name__)

_COMMANDS: dict[str, Callable[..., pipeline.Summary]] = {
    "synth": pipeline.cmd_synth,
    "project": pipeline.cmd_project,
    "density": pipeline.cmd_density,
    "featurize": pipeline.cmd_featurize,
    "reduce": pipeline.cmd_reduce,
    "fuse": pipeline.cmd_fuse,
    "backproject": pipeline.cmd_backproject,
    "refine": pipeline.cmd_refine,
    "sphere": pipeline.cmd_sphere,
    "eval": pipeline.cmd_eval,
    "run": pipeline.cmd_run,
}
_TAKES_LOGITS = ("fuse", "run")


def _configure_logging() -> None:
    level_name = os.getenv(_LOG_ENV, "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=str(_DEFAULT_CONFIG))
    common.add_argument("--scan", help="glob of scan files inside the input directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--feature-set")
    common.add_argument("--input", help="directory of input PLY scans")
    common.add_argument("--output", help="directory for per-scan artifacts")

    parser = argparse.ArgumentParser(
        prog="lidarsphere", description="Spherical-projection annotation pipeline for TLS scans"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sub = commands.add_parser(name, parents=[common])
        if name in _TAKES_LOGITS:
            sub.add_argument("--baseline", action="store_true", help="use the forest baseline ensemble")
            sub.add_argument("--logits", help="directory of LGTS logit stacks")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {
        "io.scan_glob": args.scan,
        "io.input_dir": args.input,
        "io.output_dir": args.output,
        "seed": args.seed,
        "workers": args.workers,
        "features.set": args.feature_set,
    }


def _log_summary(command: str, summary: pipeline.Summary) -> None:
    _LOGGER.info("Run summary: %s", command)
    for scan, stats in summary.items():
        fields = " ".join(f"{key}={value}" for key, value in stats.items())
        _LOGGER.info("Scan '%s': %s", scan, fields)


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = _build_parser().parse_args(argv)

    config_path = Path(args.config)
    if args.config == str(_DEFAULT_CONFIG) and not config_path.exists():
        config_path = None

    try:
        config = load_config(config_path, _overrides(args))
        command = _COMMANDS[args.command]
        if args.command in _TAKES_LOGITS:
            summary = command(config, baseline=args.baseline, logits_dir=args.logits)
        else:
            summary = command(config)
    except LidarSphereError as exc:
        _LOGGER.error("%s error: %s", type(exc).__name__.removesuffix("Error") or "Pipeline", exc)
        return exc.exit_code
    except OSError as exc:
        _LOGGER.error("Data error: %s", exc)
        return 3
    except Exception:
        _LOGGER.exception("Internal error")
        return 4

    _log_summary(args.command, summary)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
