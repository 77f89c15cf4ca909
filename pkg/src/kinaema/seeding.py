"""One 64-bit seed, many independent streams.

Streams are addressed by a key path such as ``(seed, "episode", 17)``; the
path is fed to numpy's SeedSequence as a spawn key, so the same path always
yields the same stream and different paths never share state.
"""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode())


def seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_key(k) for k in keys))


def derive_seed(seed: int, *keys) -> int:
    lo, hi = seed_sequence(seed, *keys).generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


def rng_for(seed: int, *keys) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))
