"""splitmix64 streams, scalar and vectorised, with Box-Muller normals.

Output ``k`` (0-based) of a stream seeded with ``s`` is
``mix(s + (k + 1) * GAMMA)``, so the scalar generator and the array helpers
produce identical sequences.
"""

from __future__ import annotations

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


def derive_seed(seed: int, *parts: int) -> int:
    """Fold integer ``parts`` into ``seed`` to get an independent stream seed."""
    h = seed & MASK64
    for p in parts:
        h = mix64(h + GAMMA * (p + 1))
    return h


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self) -> float:
        """Float in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        return int(self.uniform() * n)


def u64_stream(seed: int, count: int, start: int = 0) -> np.ndarray:
    k = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & MASK64) + k * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def uniform_stream(seed: int, count: int) -> np.ndarray:
    return (u64_stream(seed, count) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def normal_stream(seed: int, count: int, std: float = 1.0) -> np.ndarray:
    """``count`` float64 draws from Normal(0, std) via Box-Muller.

    Consecutive uniforms (u1, u2) form one pair; both the cosine and sine
    branches are used.
    """
    pairs = (count + 1) // 2
    u = uniform_stream(seed, 2 * pairs).reshape(pairs, 2)
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))  # 1 - u1 lies in (0, 1]
    angle = 2.0 * math.pi * u[:, 1]
    z = np.empty((pairs, 2), dtype=np.float64)
    z[:, 0] = radius * np.cos(angle)
    z[:, 1] = radius * np.sin(angle)
    return z.reshape(-1)[:count] * std
