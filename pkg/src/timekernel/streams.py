"""Named random streams derived from a single integer seed.

Each consumer asks for its own stream by name, so adding a new consumer
never shifts the draws another one sees.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def rng_stream(seed: int, name: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(stream_key(name),))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, name: str) -> int:
    """A fresh 63-bit integer seed for a named sub-run (e.g. one sweep cell)."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=(stream_key(name),))
    hi, lo = (int(w) for w in ss.generate_state(2, np.uint32))
    return ((hi << 32) | lo) >> 1
