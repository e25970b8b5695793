"""Keyed, order-independent random streams.

Every stochastic element of the toolkit (noise transforms, weight init,
dropout masks, subsampling) draws from a counter-based Philox generator
whose stream is keyed by content identifiers rather than by call order.
Two runs that touch the same (seed, key...) produce the same draws no
matter how work is scheduled across workers.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _key_words(part) -> tuple[int, int]:
    """Map one key component to two u32 words for SeedSequence.spawn_key."""
    if isinstance(part, (bool, int, np.integer)):
        value = int(part) & _MASK64
    else:
        digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=8).digest()
        value = int.from_bytes(digest, "little")
    return value & 0xFFFFFFFF, (value >> 32) & 0xFFFFFFFF


def stream(seed: int, *key) -> np.random.Generator:
    """Return the Philox generator for stream (seed, *key).

    Key components may be ints or strings; strings are hashed stably
    (not with Python's randomized hash).
    """
    spawn_key: list[int] = []
    for part in key:
        spawn_key.extend(_key_words(part))
    ss = np.random.SeedSequence(entropy=int(seed) & _MASK64, spawn_key=tuple(spawn_key))
    return np.random.Generator(np.random.Philox(ss))
