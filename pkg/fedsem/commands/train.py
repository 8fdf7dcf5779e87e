"""
commands/train.py
-----------------

``fedsem train``: run the federated rounds, with the configured attacks,
on the data written by ``gen``.
"""

from __future__ import annotations

import argparse
import json

from fedsem.commands.common import add_common_arguments, resolve_config
from fedsem.logging_config import logger
from fedsem.services.harness_service import run_train_stage


def handle(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    fed = config.effective_federation()
    logger.info(json.dumps({
        "event": "train_request",
        "rounds": fed.rounds,
        "aggregation": fed.aggregation,
        "training_mode": fed.training_mode,
        "attacks": [s.kind.value for s in config.attacks],
    }))
    try:
        result = run_train_stage(config)
    except Exception as e:
        logger.error(json.dumps({"event": "train_error", "detail": getattr(e, "detail", str(e))}))
        raise
    logger.info(json.dumps({
        "event": "train_response",
        "rounds": len(result.reports),
        "final_entropy": result.reports[-1].entropy,
        "converged_at": result.converged_at,
    }))
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("train", help="Run the federated rounds.")
    add_common_arguments(parser)
    parser.set_defaults(func=handle)
