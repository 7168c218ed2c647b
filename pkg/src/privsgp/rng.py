"""Deterministic counter-based RNG streams.

Every random quantity in a run comes from a Philox stream keyed by
``(seed, node, purpose)``. Streams for different nodes or purposes never
share state, so changing one consumer (e.g. turning privacy noise off) does
not shift the draws seen by another (e.g. sample selection).
"""

from __future__ import annotations

import numpy as np

# Purpose codes are part of the stream key; never renumber them.
PURPOSES = {
    "sample": 0,
    "noise": 1,
    "init": 2,
    "data": 3,
    "probe": 4,
}


def stream(seed: int, node: int, purpose: str) -> np.random.Generator:
    """Return a fresh generator for ``(seed, node, purpose)``."""
    if purpose not in PURPOSES:
        raise ValueError(f"unknown stream purpose {purpose!r}")
    if seed < 0 or node < 0:
        raise ValueError("seed and node must be non-negative")
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(node), PURPOSES[purpose]))
    return np.random.Generator(np.random.Philox(seq))


class IndexSampler:
    """Uniform draws from ``{0..J-1}`` for one node, buffered in blocks."""

    def __init__(self, seed: int, node: int, J: int, block: int = 1024):
        if J < 1:
            raise ValueError("J must be >= 1")
        self.J = J
        self._rng = stream(seed, node, "sample")
        self._block = block
        self._buf = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> int:
        if self._pos >= self._buf.size:
            self._buf = self._rng.integers(0, self.J, size=self._block)
            self._pos = 0
        out = int(self._buf[self._pos])
        self._pos += 1
        return out


class NoiseSource:
    """Standard-normal vectors of dimension ``d`` for one node, buffered."""

    def __init__(self, seed: int, node: int, d: int, block: int = 256):
        self.d = d
        self._rng = stream(seed, node, "noise")
        self._block = block
        self._buf = np.empty((0, d))
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos >= self._buf.shape[0]:
            self._buf = self._rng.standard_normal((self._block, self.d))
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out
