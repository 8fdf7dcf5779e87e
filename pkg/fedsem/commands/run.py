"""
commands/run.py
---------------

``fedsem run``: the whole pipeline plus ``manifest.json``.
``--ablation`` switches trust weighting or disagreement off.
"""

from __future__ import annotations

import argparse
import json

from fedsem.commands.common import add_common_arguments, resolve_config
from fedsem.logging_config import logger
from fedsem.services.harness_service import run_experiment


def handle(args: argparse.Namespace) -> int:
    overrides = {"ablation": args.ablation} if args.ablation else {}
    config = resolve_config(args, **overrides)
    logger.info(json.dumps({
        "event": "run_request",
        "seed": config.seed,
        "ablation": config.ablation,
        "output_dir": config.output_dir,
    }))
    try:
        headline = run_experiment(config)
    except Exception as e:
        logger.error(json.dumps({"event": "run_error", "detail": getattr(e, "detail", str(e))}))
        raise
    logger.info(json.dumps({"event": "run_response", **headline}))
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("run", help="Run the full pipeline.")
    add_common_arguments(parser)
    parser.add_argument("--ablation", choices=["full", "no_trust", "no_disagreement"],
                        help="Override the configured ablation.")
    parser.set_defaults(func=handle)
