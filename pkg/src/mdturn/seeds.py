"""Deterministic RNG substreams.

Every stochastic component draws from its own named substream so that
runs are reproducible from the global seed alone and independent
components can be toggled without disturbing each other's draws.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key: object) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


def substream(seed: int, *keys: object) -> np.random.Generator:
    """Generator for the substream identified by (seed, *keys).

    Keys may be ints or strings; strings are hashed with crc32 so the
    mapping is stable across processes and platforms.
    """
    entropy = [int(seed) & 0xFFFFFFFF] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
