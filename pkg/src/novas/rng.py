"""Counter-based splittable random streams.

Every stream is addressed by (master seed, integer path); Philox keyed via
``SeedSequence`` makes the addressing stable across runs and platforms, so
the same (seed, outer step, inner iteration) always reads the same numbers
regardless of what other streams were consumed in between.  This is what
makes checkpoint resume and parallel evaluation bit-reproducible.
"""

from __future__ import annotations

import numpy as np

# Fixed top-level stream domains; train/val/test noise never overlaps.
DOMAIN_TRAIN = 0
DOMAIN_VAL = 1
DOMAIN_TEST = 2
DOMAIN_DATA = 3
DOMAIN_INIT = 4


class RngStream:
    """A lazily instantiated Philox generator at one point of the key tree."""

    __slots__ = ("seed", "path", "_gen")

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._gen = None

    def child(self, *key: int) -> "RngStream":
        """Independent stream one level down the key tree."""
        return RngStream(self.seed, self.path + tuple(int(k) for k in key))

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        z = self.generator.standard_normal(shape)
        return z * scale if scale != 1.0 else z

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.generator.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self.generator.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"
