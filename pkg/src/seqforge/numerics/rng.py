"""Counter-based random streams.

A stream is the triple (seed, stream_id, counter). Draws come from the
Philox-4x64 block cipher keyed by (seed, stream_id), so streams with distinct
ids never share values and a stream can be restored from its three integers.
The counter counts consumed 4-word Philox blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_TWO_M53 = 2.0**-53

# Frozen into the checkpoint format; changing it breaks resume equality.
RNG_ALGORITHM = "philox4x64-raw"


def derive_stream_id(*parts: int) -> int:
    """Mix a tuple of small integers into one 64-bit stream id (splitmix64)."""
    h = 0x9E3779B97F4A7C15
    for p in parts:
        z = (h + (int(p) & _MASK64) + 0x9E3779B97F4A7C15) & _MASK64
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        h = z ^ (z >> 31)
    return h


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` uniformly distributed 64-bit words."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        ctr = np.array([self.counter & _MASK64, 0, 0, 0], dtype=np.uint64)
        words = np.random.Philox(key=key, counter=ctr).random_raw(n)
        self.counter += math.ceil(n / 4)
        return words

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) with 53 random bits each."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def normal(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller over paired uniforms."""
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[:m]  # (0, 1], keeps log finite
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u[m:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return z[:n]

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of ``range(n)``."""
        order = list(range(n))
        if n < 2:
            return order
        u = self.uniform(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            order[i], order[j] = order[j], order[i]
        return order

    def state(self) -> tuple[int, int, int]:
        return (self.seed, self.stream_id, self.counter)

    def copy(self) -> RngStream:
        return RngStream(self.seed, self.stream_id, self.counter)
