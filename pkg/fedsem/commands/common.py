"""
commands/common.py
------------------

Pieces shared by every subcommand: the global flags and the loading,
echo and persistence of the resolved experiment configuration.
"""

from __future__ import annotations

import argparse
import sys

from fedsem.core.config import dump_resolved_config, load_experiment_config
from fedsem.schemas.experiment import ExperimentConfig
from fedsem.services.harness_service import write_resolved_config


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="YAML experiment configuration (defaults when omitted).")
    parser.add_argument("--seed", type=int, metavar="U64", help="Override the configured seed.")
    parser.add_argument("--out", metavar="DIR", help="Override the output directory.")


def resolve_config(args: argparse.Namespace, **overrides) -> ExperimentConfig:
    """Load the configuration, echo it to stdout and store it in the output directory."""
    config = load_experiment_config(args.config, seed=args.seed, output_dir=args.out)
    if overrides:
        config = ExperimentConfig.model_validate({**config.model_dump(mode="json", by_alias=True), **overrides})
    sys.stdout.write(dump_resolved_config(config))
    sys.stdout.flush()
    write_resolved_config(config)
    return config
