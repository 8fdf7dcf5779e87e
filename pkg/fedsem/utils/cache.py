"""
utils/cache.py
---------------

In-process cache with TTL support, used to memoise remote embeddings
per ``(model, text, dim)``.  Entries are evicted lazily on retrieval.
Prototype construction may encode from several threads, so access is
guarded by a lock.
"""

from __future__ import annotations

import threading
import time
from typing import Any, Dict, Tuple


class TTLCache:
    """In-memory cache with time to live (TTL).

    The cache does not enforce a maximum size; entries disappear on
    expiry or on :meth:`clear`.
    """

    def __init__(self) -> None:
        self._store: Dict[Any, Tuple[float, Any]] = {}
        self._lock = threading.Lock()

    def set(self, key: Any, value: Any, ttl: float) -> None:
        """Store ``value`` under ``key`` for ``ttl`` seconds; ttl <= 0 stores nothing."""
        if ttl <= 0:
            return
        with self._lock:
            self._store[key] = (time.monotonic() + ttl, value)

    def get(self, key: Any) -> Any:
        """Return the cached value, or ``None`` when missing or expired."""
        with self._lock:
            entry = self._store.get(key)
            if not entry:
                return None
            expires_at, value = entry
            if time.monotonic() >= expires_at:
                self._store.pop(key, None)
                return None
            return value

    def clear(self) -> None:
        with self._lock:
            self._store.clear()

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)


# shared embedding cache
embedding_cache = TTLCache()
