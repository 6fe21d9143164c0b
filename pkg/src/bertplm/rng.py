"""Splittable random streams: one root seed, independent named substreams.

Every source of randomness in the project draws from ``stream(seed, *tags)``.
Streams are keyed by hashing the seed together with a tag path, so any stream
can be reconstructed independently of draw order elsewhere; the underlying
generator is counter-based (Philox).
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(seed: int, *tags: object) -> np.ndarray:
    """Derive a 128-bit Philox key from a seed and a tag path."""
    text = repr(int(seed)) + "".join("|" + repr(t) for t in tags)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64).copy()


def stream(seed: int, *tags: object) -> np.random.Generator:
    """Independent, reproducible generator for (seed, tag path)."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *tags)))
