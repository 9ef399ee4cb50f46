"""Counter-based random streams.

Every random draw in the package is addressed by ``(seed, tag, counter...)``
and produced by a fresh Philox generator keyed from that address. Draws are
therefore independent of call order and of how work is split across workers.
"""

from __future__ import annotations

import zlib

import numpy as np


def tag_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def sub_seed(seed: int, name: str, index: int = 0) -> int:
    """Derived 63-bit seed for module ``name`` (documented: hash(seed, name, index))."""
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(tag_id(name), int(index)))
    return int(ss.generate_state(1, np.uint64)[0]) >> 1


def stream(seed: int, name: str, *counters: int) -> np.random.Generator:
    keys = (tag_id(name), *(int(c) for c in counters))
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=keys)
    return np.random.Generator(np.random.Philox(ss))


class NoiseSource:
    """Gaussian noise addressed by (tag, step); rows map to fixed particle slots."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def normal(self, tag: str, step: int, shape, sub: int = 0) -> np.ndarray:
        counters = (step, sub) if sub else (step,)
        return stream(self.seed, tag, *counters).standard_normal(shape)


class ZeroNoise(NoiseSource):
    """Test hook: forces every injected noise term to zero."""

    def __init__(self):
        super().__init__(0)

    def normal(self, tag: str, step: int, shape, sub: int = 0) -> np.ndarray:
        return np.zeros(shape)
