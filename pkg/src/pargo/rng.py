"""Seeded randomness built on the counter-based Philox generator.

Philox is a published counter-based generator with a small state, so the
same seed yields the same stream on every platform, and substreams can be
split off deterministically for independent consumers (parameter init,
batch sampling, dataset generation). All draws happen in float64 and are
cast afterwards, so a config's dtype never changes the drawn values.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Deterministic, splittable random stream."""

    def __init__(self, seed: int = 0, _seq: np.random.SeedSequence | None = None):
        self._seq = np.random.SeedSequence(seed) if _seq is None else _seq
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    def split(self, n: int) -> list["Rng"]:
        """Spawn n independent substreams; repeated calls keep advancing."""
        return [Rng(_seq=s) for s in self._seq.spawn(n)]

    def normal(self, shape, std: float = 1.0, dtype=np.float64) -> np.ndarray:
        out = self._gen.standard_normal(size=shape) * std
        return np.ascontiguousarray(out.astype(dtype))

    def truncated_normal(self, shape, std: float, cut: float = 2.0, dtype=np.float64) -> np.ndarray:
        """Normal(0, std) with draws outside (-cut, cut) std redrawn."""
        z = self._gen.standard_normal(size=shape)
        bad = np.abs(z) >= cut
        while bad.any():
            z[bad] = self._gen.standard_normal(size=int(bad.sum()))
            bad = np.abs(z) >= cut
        return np.ascontiguousarray((z * std).astype(dtype))

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0, dtype=np.float64) -> np.ndarray:
        return np.ascontiguousarray(self._gen.uniform(low, high, size=shape).astype(dtype))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
