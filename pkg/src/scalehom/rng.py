"""Counter-based random streams for reproducible parallel Monte Carlo.

Every consumer derives its stream key by hashing (root seed, purpose label,
stream index); generators built from distinct (key, counter) pairs are
statistically independent and never share mutable state, so results are
identical for any worker count and scheduling order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_key(root_seed: int, label: str, index: int = 0) -> int:
    """64-bit stream key from (root seed, purpose label, stream index)."""
    msg = f"{root_seed}:{label}:{index}".encode()
    return int.from_bytes(hashlib.sha256(msg).digest()[:8], "little")


def stream(root_seed: int, label: str, index: int = 0, counter: int = 0) -> np.random.Generator:
    """Fresh Philox generator for the given (seed, label, index, counter) cell."""
    key = np.array([derive_key(root_seed, label, index), counter], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
