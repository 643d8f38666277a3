"""Portable seeded random streams.

All randomness in the package comes from xoshiro256** (Blackman & Vigna),
seeded through SplitMix64. Both are specified bit-for-bit, so a given seed
produces the same draws on any platform or in any language port.

Substreams are keyed: ``derive_seed(seed, k1, k2, ...)`` folds integer keys
into the seed with the SplitMix64 finalizer, and ``Xoshiro256(derived)``
expands the result into a full 256-bit state.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state. Returns ``(new_state, output)``."""
    state = (state + GOLDEN_GAMMA) & MASK64
    return state, _mix64(state)


def derive_seed(seed: int, *keys: int) -> int:
    """Fold integer ``keys`` into ``seed`` to name an independent substream."""
    h = _mix64((int(seed) + GOLDEN_GAMMA) & MASK64)
    for k in keys:
        h = _mix64(((h ^ (int(k) & MASK64)) + GOLDEN_GAMMA) & MASK64)
    return h


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** generator with SplitMix64 seeding."""

    def __init__(self, seed: int):
        state = int(seed) & MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self.s = s

    @classmethod
    def from_state(cls, s0: int, s1: int, s2: int, s3: int) -> "Xoshiro256":
        rng = cls.__new__(cls)
        rng.s = [s0 & MASK64, s1 & MASK64, s2 & MASK64, s3 & MASK64]
        return rng

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)`` by bitmask rejection on the high bits."""
        if n <= 0:
            raise ValueError("n must be positive")
        bits = (n - 1).bit_length()
        if bits == 0:
            return 0
        while True:
            r = self.next_u64() >> (64 - bits)
            if r < n:
                return r

    def random(self) -> float:
        """Uniform double in ``[0, 1)`` with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, low: float, high: float, size: int) -> np.ndarray:
        u = np.fromiter((self.random() for _ in range(size)), dtype=np.float64, count=size)
        return low + (high - low) * u

    def sample_indices(self, n: int, k: int) -> list[int]:
        """First ``k`` slots of a Fisher-Yates shuffle of ``range(n)``."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot draw {k} of {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.below(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def permutation(self, n: int) -> np.ndarray:
        return np.asarray(self.sample_indices(n, n), dtype=np.intp)
