"""
clients/encoder_client.py
-------------------------

Client for the optional remote encoder backend.

Wire contract: ``POST <url>`` with JSON ``{"model", "text", "dim"}``,
answered by ``{"embedding": [dim floats], "latency_ms": float}``.  A
bearer token is sent when ``FEDSEM_ENCODER_TOKEN`` is set.  Any failure
surfaces as :class:`EncoderBackendError`; there is no fallback to the
stub encoders.
"""

from __future__ import annotations

import json
import math
from typing import Optional, Tuple

import httpx
import numpy as np
import orjson

from fedsem.clients.http_client import CircuitOpenError, HTTPClient
from fedsem.core.config import Settings, get_settings
from fedsem.core.errors import EncoderBackendError
from fedsem.logging_config import logger
from fedsem.utils.cache import TTLCache, embedding_cache


class RemoteEncoderClient:
    def __init__(self, url: str, *, token: Optional[str] = None,
                 http_client: Optional[HTTPClient] = None,
                 cache: Optional[TTLCache] = None,
                 settings: Optional[Settings] = None) -> None:
        settings = settings or get_settings()
        self.url = url
        self.token = token
        self._http = http_client or HTTPClient(settings)
        self._cache = cache if cache is not None else embedding_cache
        self._ttl = settings.embedding_cache_ttl

    @classmethod
    def from_settings(cls, settings: Optional[Settings] = None, **kwargs) -> "RemoteEncoderClient":
        settings = settings or get_settings()
        if not settings.encoder_url:
            raise EncoderBackendError("FEDSEM_ENCODER_URL is not set")
        return cls(settings.encoder_url, token=settings.encoder_token, settings=settings, **kwargs)

    def close(self) -> None:
        self._http.close()

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        return headers

    def embed(self, model: str, text: str, dim: int) -> Tuple[np.ndarray, float]:
        """Return ``(embedding, latency_ms)`` for one text."""
        key = (model, text, dim)
        cached = self._cache.get(key)
        if cached is not None:
            values, latency = cached
            return values.copy(), latency

        payload = {"model": model, "text": text, "dim": dim}
        try:
            response = self._http.post(self.url, json=payload, headers=self._headers(), idempotent=True)
        except (httpx.HTTPError, CircuitOpenError) as exc:
            logger.error(json.dumps({
                "event": "encoder_request_error",
                "model": model,
                "detail": str(exc),
            }), exc_info=True)
            raise EncoderBackendError(f"encoder request for model '{model}' failed: {exc}") from exc

        if response.status_code != 200:
            logger.error(json.dumps({
                "event": "encoder_status_error",
                "model": model,
                "status": response.status_code,
            }))
            raise EncoderBackendError(
                f"encoder answered {response.status_code} for model '{model}': {response.text[:200]}"
            )

        try:
            body = orjson.loads(response.content)
            embedding = body["embedding"]
            latency = float(body["latency_ms"])
        except (ValueError, KeyError, TypeError) as exc:
            raise EncoderBackendError(f"malformed encoder response for model '{model}': {exc}") from exc

        if not isinstance(embedding, list) or len(embedding) != dim:
            got = len(embedding) if isinstance(embedding, list) else type(embedding).__name__
            raise EncoderBackendError(f"encoder returned embedding of length {got}, expected {dim}")
        try:
            values = np.asarray(embedding, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise EncoderBackendError(f"encoder returned non-numeric embedding: {exc}") from exc
        if not np.all(np.isfinite(values)) or not math.isfinite(latency):
            raise EncoderBackendError(f"encoder returned non-finite values for model '{model}'")

        self._cache.set(key, (values.copy(), latency), self._ttl)
        return values, latency
