"""
commands/report.py
------------------

``fedsem report``: compute the metrics CSVs from the artefacts of the
earlier stages.
"""

from __future__ import annotations

import argparse
import json

from fedsem.commands.common import add_common_arguments, resolve_config
from fedsem.logging_config import logger
from fedsem.services.harness_service import run_report_stage


def handle(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    logger.info(json.dumps({"event": "report_request", "output_dir": config.output_dir}))
    try:
        headline = run_report_stage(config)
    except Exception as e:
        logger.error(json.dumps({"event": "report_error", "detail": getattr(e, "detail", str(e))}))
        raise
    logger.info(json.dumps({"event": "report_response", **headline}))
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("report", help="Write metrics CSVs.")
    add_common_arguments(parser)
    parser.set_defaults(func=handle)
