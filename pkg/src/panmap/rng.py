"""Small deterministic PRNG for reproducible scene generation and tests.

xorshift64* with a splitmix64 seed scrambler. The specific constants are the
standard published ones; the point of hand-rolling this instead of using
numpy's generators is that the byte-level stream is pinned by this file alone
and can never drift with a library upgrade.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_MULT = 0x2545F4914F6CDD1D
_SPLITMIX_GAMMA = 0x9E3779B97F4A7C15


def _splitmix64(x: int) -> int:
    x = (x + _SPLITMIX_GAMMA) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Deterministic 64-bit generator; identical streams for identical seeds."""

    def __init__(self, seed: int):
        # Scramble so that small consecutive seeds give unrelated streams.
        self._state = _splitmix64(seed & _MASK64)
        if self._state == 0:
            self._state = _SPLITMIX_GAMMA
        self._gauss_spare: float | None = None

    def next_u64(self) -> int:
        x = self._state
        x ^= (x >> 12)
        x &= _MASK64
        x ^= (x << 25) & _MASK64
        x ^= (x >> 27)
        self._state = x
        return (x * _MULT) & _MASK64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        """Uniform float in [lo, hi) with 53 bits of precision."""
        u = (self.next_u64() >> 11) * (2.0 ** -53)
        return lo + u * (hi - lo)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo bias is negligible for small n."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n

    def gauss(self) -> float:
        """Standard normal via Box-Muller (pairs generated, one cached)."""
        if self._gauss_spare is not None:
            z = self._gauss_spare
            self._gauss_spare = None
            return z
        u1 = self.uniform()
        while u1 <= 0.0:
            u1 = self.uniform()
        u2 = self.uniform()
        r = math.sqrt(-2.0 * math.log(u1))
        self._gauss_spare = r * math.sin(2.0 * math.pi * u2)
        return r * math.cos(2.0 * math.pi * u2)

    def unit_vector(self, dim: int):
        """Uniformly random direction on the unit sphere in R^dim."""
        import numpy as np

        while True:
            v = np.array([self.gauss() for _ in range(dim)])
            norm = float(np.linalg.norm(v))
            if norm > 1e-12:
                return v / norm

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randint(i + 1)
            seq[i], seq[j] = seq[j], seq[i]
