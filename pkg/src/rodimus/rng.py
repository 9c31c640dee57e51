"""Seeded randomness.

All randomness in the package flows through :class:`Rng`, a thin wrapper
around numpy's Philox counter-based generator.  Philox is keyed, not
state-seeded: the same (seed, stream) pair yields the same sequence on every
platform, and independent streams (data vs. init vs. per-epoch shuffles) are
obtained by varying the stream id instead of consuming from one shared state.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Philox4x64 generator addressed by (seed, stream)."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed % 2**64, self.stream % 2**64], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, stream: int) -> "Rng":
        """A fresh, independent generator for the given stream id."""
        return Rng(self.seed, stream)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def trunc_normal(self, shape, std: float = 1.0, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) with draws outside +/- bound*std redrawn."""
        out = self._gen.standard_normal(shape)
        bad = np.abs(out) > bound
        while np.any(bad):
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)
