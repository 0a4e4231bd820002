"""Splittable counter-based random streams.

Every random draw in the package comes from an :class:`Rng` derived from a
root seed plus a path of keys, e.g. ``Rng(7).split("train", step)``.  The
stream for a given path does not depend on how many draws were taken from
any other stream, which is what makes resumed training reproduce the
uninterrupted trajectory.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("rng keys must be non-negative")
        return int(key)
    return zlib.crc32(str(key).encode("utf-8"))


class Rng:
    """Philox stream addressed by ``(seed, path)``."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(_key_to_int(k) for k in keys))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    # draws
    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def random(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low: float, high: float, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
