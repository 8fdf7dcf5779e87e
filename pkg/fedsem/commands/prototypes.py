"""
commands/prototypes.py
----------------------

``fedsem prototypes``: build the semantic prototypes of every configured
concept and dump them with their disagreement.
"""

from __future__ import annotations

import argparse
import json

from fedsem.commands.common import add_common_arguments, resolve_config
from fedsem.logging_config import logger
from fedsem.services.harness_service import run_prototypes_stage


def handle(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    logger.info(json.dumps({
        "event": "prototypes_request",
        "concepts": len(config.data.concepts),
        "k": config.data.k,
        "output_dir": config.output_dir,
    }))
    try:
        prototypes = run_prototypes_stage(config)
    except Exception as e:
        logger.error(json.dumps({"event": "prototypes_error", "detail": getattr(e, "detail", str(e))}))
        raise
    logger.info(json.dumps({
        "event": "prototypes_response",
        "prototypes": len(prototypes),
        "max_disagreement": max(p.disagreement for p in prototypes),
    }))
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("prototypes", help="Build prototypes and their disagreement.")
    add_common_arguments(parser)
    parser.set_defaults(func=handle)
