"""Counter-based SplitMix64 generator.

Output ``n`` (1-based) of a stream seeded with ``s`` is
``mix(s + n * 0x9E3779B97F4A7C15 mod 2**64)`` where ``mix`` is the standard
SplitMix64 finalizer. Because each output depends only on its counter the
stream can be drawn in vectorized blocks and reproduced in any language.

Derived quantities:

* ``uniform``  -- ``(x >> 11) * 2**-53``, a double in [0, 1)
* ``integers`` -- ``lo + floor(uniform * (hi - lo))``
* ``normal``   -- Box-Muller on two consecutive uniforms, cosine branch only
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK64 = (1 << 64) - 1
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _key_u64(key: int | str) -> int:
    if isinstance(key, str):
        return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little")
    return int(key) & MASK64


def derive_seed(seed: int, *keys: int | str) -> int:
    """Hash a seed with a sequence of keys into an independent 64-bit seed.

    ``h = mix(seed + G)``, then per key ``h = mix(h ^ mix(key + 2G))``;
    string keys enter as the first 8 bytes (little endian) of their SHA-256.
    """
    h = mix64((int(seed) & MASK64) + GAMMA)
    for key in keys:
        h = mix64(h ^ mix64(_key_u64(key) + 2 * GAMMA))
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        return mix64(self.seed + self.counter * GAMMA)

    def u64(self, n: int) -> np.ndarray:
        n = int(n)
        start = self.counter + 1
        self.counter += n
        if n == 0:
            return np.empty(0, dtype=np.uint64)
        # counters reduced mod 2**64 before entering uint64 arithmetic
        base = np.uint64((self.seed + start * GAMMA) & MASK64)
        steps = np.arange(n, dtype=np.uint64) * np.uint64(GAMMA)
        return _mix64_array(base + steps)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size: int | None = None):
        if size is None:
            return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)
        x = (self.u64(size) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + (hi - lo) * x

    def integers(self, lo: int, hi: int, size: int | None = None):
        """Integers in ``[lo, hi)``."""
        if hi <= lo:
            raise ValueError("empty integer range")
        if size is None:
            return lo + int(math.floor(self.uniform() * (hi - lo)))
        u = self.uniform(size=size)
        return lo + np.floor(u * (hi - lo)).astype(np.int64)

    def normal(self, size: int) -> np.ndarray:
        u = self.uniform(size=2 * size).reshape(size, 2)
        u1 = 1.0 - u[:, 0]  # (0, 1]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u[:, 1])

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort of iid uniforms; ties are measure-zero at 53 bits
        return np.argsort(self.uniform(size=n), kind="stable")
