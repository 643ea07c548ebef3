"""Counter-based random streams.

Every random draw in the project comes from a Philox generator keyed by
(seed, purpose) with the draw's coordinates (step, sample index, ...) as
the counter. Streams are therefore stateless and reproducible regardless
of worker count or evaluation order, and training can resume mid-run
without replaying earlier draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Generator for one (seed, purpose, counters...) coordinate."""
    if len(counters) > 4:
        raise ValueError("at most 4 counter coordinates supported")
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, purpose_code(purpose)], dtype=np.uint64)
    counter = np.zeros(4, dtype=np.uint64)
    for i, c in enumerate(counters):
        counter[i] = c & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=key, counter=counter))
