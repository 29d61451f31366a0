"""Seeded, platform-independent random streams.

Streams use numpy's counter-based Philox bit generator keyed through a
``SeedSequence``; ``child(*path)`` derives an independent sub-stream, so a
given (seed, path) always yields the same draws regardless of what other
streams consumed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError

ALGORITHMS = ("philox4x64",)


@dataclass
class RngStream:
    seed: int
    algorithm: str = "philox4x64"
    path: tuple = ()
    _gen: np.random.Generator | None = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown RNG algorithm {self.algorithm!r}; known: {ALGORITHMS}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        self.seed = int(self.seed)
        self.path = tuple(int(p) for p in self.path)

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.Philox(ss))
        return self._gen

    def child(self, *path: int) -> "RngStream":
        return RngStream(self.seed, self.algorithm, self.path + tuple(path))

    def normal(self, size, scale: float = 1.0, dtype=np.float64) -> np.ndarray:
        return (self.generator.standard_normal(size) * scale).astype(dtype, copy=False)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def truncated_normal(self, size, std: float = 0.02, bound: float = 2.0, dtype=np.float64) -> np.ndarray:
        """Normal(0, std) resampled until every draw lies within ``bound`` std."""
        out = self.generator.standard_normal(size)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.generator.standard_normal(int(bad.sum()))
            bad = np.abs(out) > bound
        return (out * std).astype(dtype, copy=False)
