"""Counter-based random streams keyed by tuples such as (seed, layer, role)."""

from __future__ import annotations

import hashlib
import zlib

import numpy as np

from .errors import InvalidConfig


def _key_word(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    value = int(part)
    if value < 0:
        raise InvalidConfig(f"seed components must be non-negative, got {value}")
    return value


def stream(*key) -> np.random.Generator:
    """Philox generator whose state depends only on ``key``."""
    words = [_key_word(k) for k in key]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def digest(*arrays: np.ndarray, length: int = 16) -> str:
    """Hex sha256 of the float64 little-endian bytes of ``arrays``."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:length]
