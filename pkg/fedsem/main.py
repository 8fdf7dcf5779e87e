"""
main.py
-------

Command line entry point.  Builds the argument parser, registers one
subcommand per pipeline stage and maps failures to exit codes:

* ``0`` success
* ``2`` invalid configuration or arguments
* ``1`` a stage failed; the diagnostic names it
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from typing import Optional, Sequence

# Import logging first so the configuration applies before other modules log.
from fedsem.logging_config import logger

from fedsem.commands import gen, infer, prototypes, report, run, train
from fedsem.core.errors import FedsemError, InvalidInputError, StageError

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID = 2


def create_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsem",
        description="Trust-aware federated zero-shot intrusion detection simulator.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    # one subcommand per stage
    prototypes.register(subparsers)
    gen.register(subparsers)
    train.register(subparsers)
    infer.register(subparsers)
    report.register(subparsers)
    run.register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID

    start = time.time()
    try:
        status = args.func(args)
    except StageError as exc:
        sys.stderr.write(f"fedsem {args.command}: {exc.detail}\n")
        status = EXIT_FAILURE
    except InvalidInputError as exc:
        sys.stderr.write(f"fedsem {args.command}: invalid input: {exc.detail}\n")
        status = EXIT_INVALID
    except (FedsemError, OSError) as exc:
        sys.stderr.write(f"fedsem {args.command}: {getattr(exc, 'detail', exc)}\n")
        status = EXIT_FAILURE
    duration_ms = (time.time() - start) * 1000
    try:
        logger.info(json.dumps({
            "event": "command_finished",
            "command": args.command,
            "status": status,
            "duration_ms": round(duration_ms, 2),
        }))
    except Exception:
        logger.info(f"{args.command} -> {status} ({round(duration_ms, 2)} ms)")
    return status


if __name__ == "__main__":
    sys.exit(main())
