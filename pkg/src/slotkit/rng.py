"""Seeded random number streams shared by every module.

All randomness in the package flows through `Rng`, a thin wrapper around
numpy's counter-based Philox generator. Philox is platform-stable, and
independent sub-streams are derived from (seed, path) pairs rather than by
drawing from a parent, so results never depend on call order. Training
loops derive one stream per step, which makes checkpoint resume exact.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """A named Philox stream identified by an integer seed and a path."""

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def stream(self, *key: int) -> "Rng":
        """Derive an independent stream; same (seed, path) always gives the same draws."""
        return Rng(self.seed, self.path + tuple(key))

    def normal(self, shape=(), dtype=np.float64):
        return self._gen.standard_normal(size=shape, dtype=np.dtype(dtype))

    def uniform(self, low=0.0, high=1.0, shape=(), dtype=np.float64):
        return self._gen.uniform(low, high, size=shape).astype(dtype, copy=False)

    def integers(self, low, high, shape=()):
        """Uniform integers in [low, high) as int64."""
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def permutation(self, n: int):
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
