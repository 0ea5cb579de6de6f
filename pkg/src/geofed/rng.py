"""Keyed random streams.

Every stream is a Philox (counter-based) generator keyed by a tuple of
integers, typically ``(seed, purpose, institution, round, index)``. Two
different keys never share a stream, and the draw order of one stream does
not depend on any other, so results are independent of thread scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np

# stable integer codes for stream purposes
PURPOSES = {
    "init": 1,
    "profile": 2,
    "sample": 3,
    "split": 4,
    "shuffle": 5,
    "perturb": 6,
    "pixels": 7,
    "proto_init": 8,
    "mask": 9,
    "balnet": 10,
}


def _code(part) -> int:
    if isinstance(part, str):
        return PURPOSES.get(part) or zlib.crc32(part.encode())
    return int(part) & 0xFFFFFFFFFFFFFFFF


def stream(seed: int, *key) -> np.random.Generator:
    """Generator for ``(seed, *key)``; strings are mapped to fixed codes."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_code(k) for k in key]
    ss = np.random.SeedSequence(entropy)
    return np.random.Generator(np.random.Philox(ss))
