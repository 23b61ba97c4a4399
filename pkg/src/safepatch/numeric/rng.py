"""Counter-based deterministic random numbers.

Each draw is a pure function of ``(seed, index)``: a splitmix64 finaliser is
applied to ``key(seed) + index * GOLDEN``. Normals use the inverse normal CDF
on a 53-bit uniform, so one normal consumes exactly one draw unit and the
stream is reproducible bit for bit on any platform with IEEE doubles.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtri

from ..exceptions import InvalidShapeError

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def _mix_int(value: int) -> int:
    return int(_mix(np.array([value & _MASK64], dtype=np.uint64))[0])


class Rng:
    """A (seed, counter) pair; every draw advances ``counter`` by one unit.

    Sub-streams are derived with :meth:`fold`, which hashes extra integers
    into the seed and starts a fresh counter, so independent consumers never
    share draws.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def fold(self, *keys: int) -> "Rng":
        seed = self.seed
        for key in keys:
            seed = _mix_int(seed ^ _mix_int((int(key) + 0x632BE59BD9B4E019) & _MASK64))
        return Rng(seed)

    def bits(self, n: int) -> np.ndarray:
        """Return ``n`` raw 64-bit draws and advance the counter by ``n``."""
        key = np.uint64(_mix_int(self.seed))
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        return _mix(key + idx * _GOLDEN)

    def uniform(self, n: int) -> np.ndarray:
        """Uniforms strictly inside (0, 1)."""
        return ((self.bits(n) >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers in ``[low, high)``; one draw unit each."""
        if high <= low:
            raise ValueError("empty integer range")
        u = self.uniform(n)
        return low + np.minimum((u * (high - low)).astype(np.int64), high - low - 1)

    def normal(self, n: int) -> np.ndarray:
        return ndtri(self.uniform(n))

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")


def as_rng(seed_or_rng) -> Rng:
    if isinstance(seed_or_rng, Rng):
        return seed_or_rng
    return Rng(int(seed_or_rng))


def check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise InvalidShapeError(f"shape must be non-empty with positive extents, got {shape}")
    return shape
