"""Seeded, splittable random streams.

Substreams are keyed by name so that phantom simulation, weight init and
diffusion noise never share state, whatever order they are created in.
"""

from __future__ import annotations

import zlib

import numpy as np

ALGORITHM = "PCG64"


def _key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    """A named PCG64 stream derived from a 64-bit seed."""

    algorithm = ALGORITHM

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(seq))

    def spawn(self, name: str | int) -> "Rng":
        key = name if isinstance(name, int) else _key(name)
        return Rng(self.seed, self.path + (key,))

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self.generator.standard_normal(shape, dtype=np.float32 if dtype == np.float32 else np.float64)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def poisson(self, lam):
        return self.generator.poisson(lam)

    def permutation(self, n):
        return self.generator.permutation(n)

    def get_state(self) -> dict:
        return self.generator.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.generator.bit_generator.state = state

    def __repr__(self) -> str:
        return f"Rng({ALGORITHM}, seed={self.seed}, path={self.path})"
