"""Seed derivation and the splitmix64 stream used by every stochastic stage.

Everything random in the pipeline is drawn from a :class:`Stream` whose seed
comes from :func:`derive_seed`, so any stage can be recomputed in isolation
from the master seed and a short index path.
"""

from __future__ import annotations

import math
from typing import Iterable

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_TWO_POW_53 = float(1 << 53)


def mix64(z: int) -> int:
    """splitmix64 output finalizer (a bijection on 64-bit words)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(x: int) -> int:
    """First output of a splitmix64 generator seeded with ``x``."""
    return mix64((x + GOLDEN_GAMMA) & MASK64)


def derive_seed(master: int, path: Iterable[int] = ()) -> int:
    state = master & MASK64
    for index in path:
        state = mix64(state ^ splitmix64(index & MASK64))
    return state


class Stream:
    """Sequential splitmix64 generator.

    Uniforms take the top 53 bits of each word; normals use the cosine branch
    of Box-Muller and always consume exactly two words.
    """

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & MASK64

    @classmethod
    def derived(cls, master: int, path: Iterable[int] = ()) -> "Stream":
        return cls(derive_seed(master, path))

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return mix64(self.state)

    def uniform(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) / _TWO_POW_53

    def uniform_range(self, lo: float, hi: float) -> float:
        if lo == hi:
            self.next_u64()
            return lo
        return lo + (hi - lo) * self.uniform()

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]."""
        span = hi - lo + 1
        return lo + min(int(self.uniform() * span), span - 1)

    def normal(self, mean: float = 0.0, sd: float = 1.0) -> float:
        u1 = 1.0 - self.uniform()  # (0, 1], keeps log finite
        u2 = self.uniform()
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return mean + sd * z
