"""Seed derivation: every random stream is keyed by the master seed plus a path."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    return int(part)


def derive_rng(seed: int, *path) -> np.random.Generator:
    """Independent generator for ``(seed, *path)``; path items are ints or strings."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_key(p) for p in path))
    return np.random.default_rng(ss)


def derive_seed(seed: int, *path) -> int:
    """Integer seed for a sub-stage, so stage functions can keep an ``int`` seed argument."""
    return int(derive_rng(seed, *path).integers(0, 2**62))
