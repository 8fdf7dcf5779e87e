"""
clients/http_client.py
----------------------

HTTP client wrapper with connection pooling, timeouts, retries and a
simple circuit breaker.  It uses ``httpx`` under the hood and honours
the settings defined in :mod:`fedsem.core.config`.

Retries apply only to requests flagged idempotent (GET always is;
encoder POSTs are idempotent by contract).  Transport errors and
429/502/503/504 responses are retried with exponential backoff.  The
circuit breaker short-circuits requests to a host after repeated
consecutive failures.
"""

from __future__ import annotations

import json
import time
from typing import Any, Dict, Optional

import httpx

from fedsem.core.config import Settings, get_settings
from fedsem.logging_config import log_http_request, logger

# HTTP status codes that trigger a retry
RETRY_STATUS = {429, 502, 503, 504}


class CircuitOpenError(RuntimeError):
    pass


class CircuitBreaker:
    """Per-host circuit breaker.

    Tracks consecutive failures for each host and trips when the count
    reaches ``failure_threshold``.  The breaker resets after
    ``reset_timeout`` seconds.
    """

    def __init__(self, failure_threshold: int = 5, reset_timeout: float = 60.0) -> None:
        self.failure_threshold = failure_threshold
        self.reset_timeout = reset_timeout
        self._failures: Dict[str, int] = {}
        self._tripped_until: Dict[str, float] = {}

    def record_failure(self, host: str) -> None:
        self._failures[host] = self._failures.get(host, 0) + 1
        if self._failures[host] >= self.failure_threshold:
            self._tripped_until[host] = time.monotonic() + self.reset_timeout

    def record_success(self, host: str) -> None:
        self._failures.pop(host, None)
        self._tripped_until.pop(host, None)

    def can_request(self, host: str) -> bool:
        until = self._tripped_until.get(host)
        if until is None:
            return True
        if time.monotonic() >= until:
            self._tripped_until.pop(host, None)
            self._failures.pop(host, None)
            return True
        return False


class HTTPClient:
    """Synchronous HTTP client with retry and circuit breaker.

    ``transport`` is handed to ``httpx.Client``; tests pass an
    ``httpx.MockTransport`` here.
    """

    def __init__(self, settings: Optional[Settings] = None, *,
                 transport: Optional[httpx.BaseTransport] = None,
                 breaker: Optional[CircuitBreaker] = None) -> None:
        settings = settings or get_settings()
        self.timeout = settings.encoder_timeout
        self._client = httpx.Client(timeout=self.timeout, transport=transport)
        self._breaker = breaker or CircuitBreaker()
        self.max_retries = settings.http_max_retries
        self.backoff_factor = settings.http_backoff_factor

    def close(self) -> None:
        """Close the underlying HTTPX client and release resources."""
        self._client.close()

    def __enter__(self) -> "HTTPClient":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def _request(self, method: str, url: str, *, attempt: int = 0, **kwargs: Any) -> httpx.Response:
        """Perform a single HTTP request without retries."""
        host = httpx.URL(url).host
        headers_for_log = kwargs.get("headers") or {}
        json_body_for_log = kwargs.get("json")
        if not self._breaker.can_request(host):
            raise CircuitOpenError(f"Circuit breaker open for host {host}")
        log_http_request(method, url, headers=headers_for_log, json_body=json_body_for_log, attempt=attempt)
        start_ts = time.monotonic()
        response: Optional[httpx.Response] = None
        try:
            response = self._client.request(method, url, **kwargs)
        except httpx.HTTPError as exc:
            self._breaker.record_failure(host)
            logger.warning(json.dumps({
                "event": "http_error",
                "method": method,
                "url": url,
                "attempt": attempt,
                "detail": str(exc),
            }))
            raise
        finally:
            duration_ms = (time.monotonic() - start_ts) * 1000
            log_http_request(method, url, headers=headers_for_log,
                             status=response.status_code if response is not None else None,
                             duration_ms=duration_ms, attempt=attempt)
        # only 5xx counts against the host; 4xx is the caller's problem
        if 500 <= response.status_code < 600:
            self._breaker.record_failure(host)
        else:
            self._breaker.record_success(host)
        return response

    def _with_retries(self, method: str, url: str, **kwargs: Any) -> httpx.Response:
        last_exc: Optional[Exception] = None
        response: Optional[httpx.Response] = None
        for attempt in range(self.max_retries + 1):
            try:
                response = self._request(method, url, attempt=attempt, **kwargs)
                last_exc = None
                if response.status_code not in RETRY_STATUS:
                    return response
            except CircuitOpenError:
                raise
            except httpx.HTTPError as exc:
                last_exc = exc
            if attempt >= self.max_retries:
                break
            delay = self.backoff_factor * (2 ** attempt)
            if delay > 0:
                time.sleep(delay)
        if last_exc is not None:
            raise last_exc
        assert response is not None
        return response

    def request(self, method: str, url: str, *, idempotent: Optional[bool] = None, **kwargs: Any) -> httpx.Response:
        """Public request method.

        GET is retried by default; other methods only when
        ``idempotent=True``.
        """
        method_upper = method.upper()
        retry = (method_upper == "GET") if idempotent is None else idempotent
        if retry:
            return self._with_retries(method_upper, url, **kwargs)
        return self._request(method_upper, url, **kwargs)

    def post(self, url: str, *, idempotent: bool = False, **kwargs: Any) -> httpx.Response:
        return self.request("POST", url, idempotent=idempotent, **kwargs)
