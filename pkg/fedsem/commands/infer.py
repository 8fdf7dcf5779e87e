"""
commands/infer.py
-----------------

``fedsem infer``: score the test split with the trained global matrix
and write ``assessments.csv``.
"""

from __future__ import annotations

import argparse
import json

from fedsem.commands.common import add_common_arguments, resolve_config
from fedsem.logging_config import logger
from fedsem.services.harness_service import run_infer_stage


def handle(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    inference = config.effective_inference()
    logger.info(json.dumps({
        "event": "infer_request",
        "lambda": inference.zds_lambda,
        "mode": inference.disagreement_mode,
    }))
    try:
        samples = run_infer_stage(config)
    except Exception as e:
        logger.error(json.dumps({"event": "infer_error", "detail": getattr(e, "detail", str(e))}))
        raise
    logger.info(json.dumps({
        "event": "infer_response",
        "samples": len(samples),
        "abstentions": sum(1 for s in samples if s.abstained),
    }))
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("infer", help="Attribute and score the test split.")
    add_common_arguments(parser)
    parser.set_defaults(func=handle)
