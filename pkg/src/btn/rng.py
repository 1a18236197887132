"""Counter-based 64-bit generator with splittable streams.

The i-th output of a stream with key ``k`` is ``mix64(k + (i + 1) * GOLDEN)``
where ``mix64`` is the SplitMix64 finalizer. The whole state is the pair
(key, counter), 16 bytes, so any implementation reproduces the same streams
from the same two integers.
"""

from __future__ import annotations

import struct

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_M1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_M2)
    z ^= z >> np.uint64(31)
    return z


def _mix_int(v: int) -> int:
    return int(mix64(np.array([v & _MASK], dtype=np.uint64))[0])


class CounterRNG:
    """Stateless-by-construction generator: outputs depend only on (key, counter)."""

    def __init__(self, key: int, counter: int = 0):
        self.key = key & _MASK
        self.counter = counter & _MASK

    @classmethod
    def from_seed(cls, seed: int) -> "CounterRNG":
        return cls(_mix_int(seed ^ 0x5EED5EED5EED5EED))

    def split(self, stream: int) -> "CounterRNG":
        """Independent child stream; does not advance the parent."""
        return CounterRNG(_mix_int(self.key ^ _mix_int(stream + GOLDEN)))

    def state_bytes(self) -> bytes:
        return struct.pack("<QQ", self.key, self.counter)

    @classmethod
    def from_state_bytes(cls, raw: bytes) -> "CounterRNG":
        key, counter = struct.unpack("<QQ", raw)
        return cls(key, counter)

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64) + np.uint64(self.counter)
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GOLDEN)
        self.counter = (self.counter + n) & _MASK
        return mix64(z)

    def random(self, n: int) -> np.ndarray:
        """Uniform doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def uniform(self, low, high, n: int) -> np.ndarray:
        return low + (high - low) * self.random(n)

    def normal(self, n: int) -> np.ndarray:
        """Box-Muller; consumes 2 * ceil(n / 2) draws."""
        m = (n + 1) // 2
        u1 = 1.0 - self.random(m)  # (0, 1]
        u2 = self.random(m)
        rad = np.sqrt(-2.0 * np.log(u1))
        out = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
        return out[:n]

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers in [low, high] inclusive (multiply-shift, negligible bias)."""
        span = high - low + 1
        return low + np.floor(self.random(n) * span).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates driven by ``random``."""
        perm = np.arange(n)
        u = self.random(max(n - 1, 0))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
