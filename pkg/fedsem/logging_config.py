"""
logging_config.py
------------------

Shared logging configuration and helpers for structured logging across
the simulator.  Messages are serialised as JSON objects carrying an
``"event"`` key so that experiment logs can be grepped or loaded into a
dataframe after the fact.

Log output goes to stderr.  stdout is reserved for the command line
surface, which echoes the resolved experiment configuration there.

Import ``logger`` and call its methods instead of ``logging.info``
directly.  The ``log_call`` decorator records entry and exit of service
functions at DEBUG level without dumping tokens or whole matrices.
"""

from __future__ import annotations

import json
import logging
import sys
from functools import wraps
from typing import Any, Callable, Dict

import numpy as np

from fedsem.core.config import get_settings

# -----------------------------------------------------------------------------
# Configure global logging
# -----------------------------------------------------------------------------

logging.basicConfig(
    level=getattr(logging, get_settings().log_level.upper(), logging.INFO),
    format="%(asctime)s %(levelname)s %(message)s",
    handlers=[logging.StreamHandler(sys.stderr)],
)

logger = logging.getLogger("fedsem")


def _sanitize(obj: Any) -> Any:
    """Recursively sanitise objects for logging.

    Dictionaries lose keys containing 'token', 'password' or 'secret'.
    numpy arrays are summarised by shape and dtype, since a projection
    matrix in a log line is noise.  Lists and tuples are processed
    element-wise.  Anything else that does not serialise becomes its
    ``str``.
    """
    if isinstance(obj, (bytes, bytearray)):
        return f"<binary {len(obj)} bytes>"
    if isinstance(obj, np.ndarray):
        return f"<ndarray shape={obj.shape} dtype={obj.dtype}>"
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, dict):
        clean: Dict[str, Any] = {}
        for k, v in obj.items():
            if any(keyword in str(k).lower() for keyword in ("token", "password", "secret")):
                continue
            clean[str(k)] = _sanitize(v)
        return clean
    if isinstance(obj, (list, tuple)):
        return [_sanitize(i) for i in obj]
    # pydantic models
    try:
        if hasattr(obj, "model_dump"):
            return _sanitize(obj.model_dump())
    except Exception:
        pass
    try:
        return json.loads(json.dumps(obj))
    except Exception:
        return str(obj)


def log_call(func: Callable[..., Any]) -> Callable[..., Any]:
    """Decorator logging entry and exit of a function at DEBUG level.

    Arguments and the return value pass through ``_sanitize`` first.
    Failures while logging never affect the wrapped call.
    """

    @wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        if logger.isEnabledFor(logging.DEBUG):
            try:
                logger.debug(json.dumps({
                    "event": "call_start",
                    "function": func.__name__,
                    "args": _sanitize(args),
                    "kwargs": _sanitize(kwargs),
                }))
            except Exception:
                logger.debug(json.dumps({"event": "call_start", "function": func.__name__}))
        result = func(*args, **kwargs)
        if logger.isEnabledFor(logging.DEBUG):
            try:
                logger.debug(json.dumps({
                    "event": "call_end",
                    "function": func.__name__,
                    "result": _sanitize(result),
                }))
            except Exception:
                logger.debug(json.dumps({"event": "call_end", "function": func.__name__}))
        return result

    return wrapper


def log_http_request(method: str, url: str, *, headers: Dict[str, Any] | None = None,
                     json_body: Dict[str, Any] | None = None,
                     status: int | None = None, duration_ms: float | None = None,
                     attempt: int | None = None) -> None:
    """Log an outbound HTTP request at DEBUG level.

    The ``Authorization`` header is removed before anything is written.

    Parameters
    ----------
    method : str
        The HTTP method (GET, POST, etc.)
    url : str
        The URL being requested.
    headers : dict, optional
        Request headers.  Sensitive keys are removed.
    json_body : dict, optional
        JSON payload.  The text being embedded is truncated.
    status : int, optional
        Response status code (log end only).
    duration_ms : float, optional
        Time taken in milliseconds (log end only).
    attempt : int, optional
        Zero-based retry attempt.
    """
    data: Dict[str, Any] = {
        "event": "http_request",
        "method": method,
        "url": url,
    }
    if headers is not None:
        data["headers"] = {k: v for k, v in headers.items() if k.lower() != "authorization"}
    if json_body:
        body = _sanitize(json_body)
        if isinstance(body, dict) and isinstance(body.get("text"), str) and len(body["text"]) > 80:
            body["text"] = body["text"][:80] + "..."
        data["json"] = body
    if status is not None:
        data["status"] = status
    if duration_ms is not None:
        data["duration_ms"] = round(duration_ms, 2)
    if attempt is not None:
        data["attempt"] = attempt
    logger.debug(json.dumps(data))
