"""
core/config.py
----------------

Process and experiment configuration.

``Settings`` holds process-level knobs read from the environment with
``pydantic-settings`` (prefix ``FEDSEM_``): the optional remote encoder
backend, HTTP timeouts and retries, the client training pool size and
the log level.  Experiment parameters live in a YAML document validated
by :class:`fedsem.schemas.experiment.ExperimentConfig`;
:func:`load_experiment_config` reads that document and applies the CLI
overrides.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional

import orjson
import yaml
from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from fedsem.core.errors import InvalidInputError


class Settings(BaseSettings):
    """Process settings loaded from environment variables.

    For example, ``FEDSEM_ENCODER_URL=http://localhost:9000/embed``
    switches prototype construction to the remote encoder backend and
    ``FEDSEM_ENCODER_TIMEOUT=10`` shortens its request timeout.
    """

    # Remote encoder backend (disabled when no URL is set)
    encoder_url: Optional[str] = Field(None, description="Remote encoder endpoint; unset keeps the seeded stub encoders.")
    encoder_token: Optional[str] = Field(None, description="Bearer token sent to the remote encoder.")
    encoder_timeout: float = Field(30.0, gt=0, description="Hard timeout for encoder requests in seconds.")
    embedding_cache_ttl: float = Field(3600.0, ge=0, description="Seconds a remote embedding stays cached.")

    # HTTP client settings
    http_max_retries: int = Field(3, ge=0, description="Maximum number of retries for idempotent requests.")
    http_backoff_factor: float = Field(0.5, ge=0, description="Backoff factor for exponential retry delays.")

    # Execution
    max_workers: int = Field(4, ge=1, description="Threads used to train clients within a round.")
    log_level: str = Field("INFO", description="Logging level name.")

    model_config = SettingsConfigDict(env_prefix="FEDSEM_", env_file=None, case_sensitive=False)


@lru_cache()
def get_settings() -> Settings:
    """Return a cached instance of the process settings."""
    return Settings()


def load_experiment_config(path: str | Path | None = None, *, seed: Optional[int] = None,
                           output_dir: Optional[str] = None):
    """Read, override and validate an experiment configuration.

    A missing ``path`` yields the default configuration.  ``seed`` and
    ``output_dir`` come from the ``--seed`` and ``--out`` flags and take
    precedence over the document.
    """
    from fedsem.schemas.experiment import ExperimentConfig

    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise InvalidInputError(f"cannot read config {path}: {exc}") from exc
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise InvalidInputError(f"config {path} is not valid YAML: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise InvalidInputError(f"config {path} must be a mapping at the top level")
        raw = loaded
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = output_dir
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise InvalidInputError(f"invalid experiment config: {exc}") from exc


def resolved_config_dict(config) -> Dict[str, Any]:
    """Plain-data view of a config with every default materialised."""
    return config.model_dump(mode="json", by_alias=True)


def dump_resolved_config(config) -> str:
    return yaml.safe_dump(resolved_config_dict(config), sort_keys=False, allow_unicode=True)


def config_hash(config) -> str:
    """SHA-256 of the canonical (sorted, compact) JSON form of the config.

    The output directory is excluded so the same experiment written to
    two places hashes identically.
    """
    data = resolved_config_dict(config)
    data.pop("output_dir", None)
    return hashlib.sha256(orjson.dumps(data, option=orjson.OPT_SORT_KEYS)).hexdigest()
