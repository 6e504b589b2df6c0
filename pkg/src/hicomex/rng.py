"""Splittable counter-based random streams.

Every source of randomness (initialization, dropout masks, shuffling,
synthetic rendering) draws from a SplitRng derived from the run seed by a
path of string/int labels. Streams are independent of call order between
siblings, so adding a consumer never perturbs unrelated draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


class SplitRng:
    """Philox-backed generator addressable by a label path."""

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        key = "/".join([str(self.seed)] + [str(p) for p in self.path])
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        counter_key = int.from_bytes(digest[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(key=counter_key))

    def child(self, *labels) -> "SplitRng":
        """Return an independent stream for the given sub-path."""
        return SplitRng(self.seed, self.path + tuple(labels))

    # Draws below delegate to the underlying numpy Generator; kept thin so
    # numpy's stream-stability guarantees apply directly.

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float64)

    def normal(self, loc: float, scale: float, shape) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape).astype(np.float64)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(size=shape, dtype=np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def __repr__(self) -> str:
        return f"SplitRng(seed={self.seed}, path={'/'.join(map(str, self.path))})"
