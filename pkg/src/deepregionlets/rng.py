"""Seeded xoshiro256** generator (state seeded through splitmix64).

Scalar draws run in pure Python; bulk array fills go through a numba kernel
that advances the very same state, so interleaving the two keeps one stream.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_MASK = (1 << 64) - 1
_INV_2_53 = 1.0 / (1 << 53)


def _splitmix64(x: int) -> tuple[int, int]:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK


@numba.njit(cache=True)
def _rotl_u64(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _fill_uniform(state, out):
    s0, s1, s2, s3 = state[0], state[1], state[2], state[3]
    for i in range(out.size):
        r = _rotl_u64(s1 * np.uint64(5), 7) * np.uint64(9)
        t = s1 << np.uint64(17)
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl_u64(s3, 45)
        out[i] = np.float64(r >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    state[0], state[1], state[2], state[3] = s0, s1, s2, s3


class Rng:
    """xoshiro256** stream. Identical seeds give identical streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        x = self.seed & _MASK
        s = []
        for _ in range(4):
            x, z = _splitmix64(x)
            s.append(z)
        self._s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * self.random()

    def integers(self, low: int, high: int) -> int:
        """Integer in [low, high)."""
        if high <= low:
            raise ValueError("empty integer range")
        return low + int(self.random() * (high - low))

    def normal(self) -> float:
        u1 = 1.0 - self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        out = np.empty(int(np.prod(shape, dtype=np.int64)), dtype=np.float64)
        state = np.array(self._s, dtype=np.uint64)
        _fill_uniform(state, out)
        self._s = [int(v) for v in state]
        out = low + (high - low) * out
        return out.reshape(shape)

    def normal_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = self.uniform_array((2, n))
        z = np.sqrt(-2.0 * np.log(1.0 - u[0])) * np.cos(2.0 * np.pi * u[1])
        return z.reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.integers(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.asarray(perm, dtype=np.int64)

    def spawn(self) -> "Rng":
        """Independent child stream seeded from this one."""
        return Rng(self.next_u64())
