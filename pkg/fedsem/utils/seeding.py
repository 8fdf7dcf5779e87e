"""
utils/seeding.py
----------------

Seed derivation.  Every random draw in the simulator comes from a
``numpy.random.Generator`` whose seed is derived from the experiment
seed plus the names of what is being drawn, so results never depend on
call order or thread scheduling.
"""

from __future__ import annotations

import hashlib
from typing import Any

import numpy as np


def derive_seed(*parts: Any) -> int:
    """Stable 64-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(*parts: Any) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))
