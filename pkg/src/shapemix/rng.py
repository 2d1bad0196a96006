"""Counter-based random streams with stable substream derivation.

Streams are Philox generators keyed by a 128-bit value derived from the
master seed and a substream path, so any substream can be recreated from
(seed, path) alone: nothing stateful has to be carried between phases of a
run, and data generation, parameter init, and shuffling never share a
stream. Identical seeds give identical draws on every platform (Philox is
counter-based; numpy pins its raw stream).
"""

from __future__ import annotations

import hashlib

import numpy as np

_M64 = (1 << 64) - 1


def _mix64(z: int) -> int:
    # splitmix64 finalizer; scrambles the seed/path words into key material
    z = (z + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def _label_word(label: int | str) -> int:
    if isinstance(label, int):
        return label & _M64
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Deterministic random stream addressed by (seed, substream path)."""

    def __init__(self, seed: int, path: tuple[int | str, ...] = ()):
        self.seed = int(seed) & _M64
        self.path = tuple(path)
        word = _mix64(self.seed)
        for label in self.path:
            word = _mix64(word ^ _label_word(label))
        key = word | (_mix64(word ^ 0xA5A5A5A5A5A5A5A5) << 64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, *labels: int | str) -> "Rng":
        """Fresh independent stream; same labels always give the same stream."""
        return Rng(self.seed, self.path + labels)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape).astype(np.float64, copy=False)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(np.float64, copy=False)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Draws from the half-open range [low, high)."""
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"
