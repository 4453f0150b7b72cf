"""Keyed random streams.

Every random draw in the package comes from a generator derived from a tuple
of integers (seed, sample index, step, position, ...), so results do not
depend on evaluation order or on how work is split across threads.
"""
from __future__ import annotations

import zlib

import numpy as np

_STREAM_TAGS: dict[str, int] = {}


def tag(name: str) -> int:
    """Stable 32-bit integer for a stream name (Python's ``hash`` is salted)."""
    if name not in _STREAM_TAGS:
        _STREAM_TAGS[name] = zlib.crc32(name.encode("utf-8"))
    return _STREAM_TAGS[name]


def stream(seed: int, *keys: int | str) -> np.random.Generator:
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for k in keys:
        words.append(tag(k) if isinstance(k, str) else int(k) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from ``rng`` for deriving sub-streams."""
    return int(rng.integers(0, 2**63 - 1))
