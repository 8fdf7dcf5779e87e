"""
commands/gen.py
---------------

``fedsem gen``: synthesise the labelled pool, split off the test set and
partition the training samples across clients.  Needs the prototypes
stage output.
"""

from __future__ import annotations

import argparse
import json

from fedsem.commands.common import add_common_arguments, resolve_config
from fedsem.logging_config import logger
from fedsem.services.harness_service import run_gen_stage


def handle(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    logger.info(json.dumps({
        "event": "gen_request",
        "clients": config.federation.num_clients,
        "beta": config.data.beta,
        "output_dir": config.output_dir,
    }))
    try:
        data = run_gen_stage(config)
    except Exception as e:
        logger.error(json.dumps({"event": "gen_error", "detail": getattr(e, "detail", str(e))}))
        raise
    logger.info(json.dumps({
        "event": "gen_response",
        "client_sizes": [len(ds) for ds in data.clients],
        "test_samples": len(data.test),
    }))
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen", help="Synthesise and partition the data.")
    add_common_arguments(parser)
    parser.set_defaults(func=handle)
