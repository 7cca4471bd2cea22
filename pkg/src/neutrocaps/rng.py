"""Portable pseudo-random streams for the synthetic data generator.

The generator must give identical bytes on every platform, so it does not use
numpy's bit generators. Definition (all arithmetic modulo 2**64)::

    splitmix64(x):
        z = x + 0x9E3779B97F4A7C15
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

    xorshift64*(s):                  # one step, returns (new_state, output)
        s ^= s >> 12; s ^= s << 25; s ^= s >> 27
        return s, s * 0x2545F4914F6CDD1D

A stream with key ``k`` and ``L`` lanes starts lane ``j`` at
``splitmix64(k + j)`` (replaced by 1 if zero). Each draw advances every lane by one
step and emits the ``L`` outputs in lane order; a request for ``n`` values takes
``ceil(n / L)`` steps and keeps the first ``n`` outputs. Uniform doubles are
``(out >> 11) * 2**-53``. Normals use Box-Muller on two consecutive uniform blocks
``u1, u2``: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_STAR = np.uint64(0x2545F4914F6CDD1D)


def splitmix64(x) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def derive_key(*parts: int) -> int:
    """Fold integers into one 64-bit key through repeated splitmix64."""
    key = np.uint64(0)
    with np.errstate(over="ignore"):
        for p in parts:
            key = splitmix64(np.uint64(key) ^ np.uint64(int(p) & _MASK))
    return int(key)


class XorShift64Star:
    """Lane-parallel xorshift64* stream (see module docstring for the exact definition)."""

    def __init__(self, key: int, lanes: int = 1):
        if lanes < 1:
            raise ValueError("lanes must be >= 1")
        with np.errstate(over="ignore"):
            start = np.uint64(int(key) & _MASK) + np.arange(lanes, dtype=np.uint64)
            state = splitmix64(start)
        state[state == 0] = np.uint64(1)
        self.state = state
        self.lanes = lanes

    def next_u64(self, n: int) -> np.ndarray:
        steps = -(-n // self.lanes)
        out = np.empty((steps, self.lanes), dtype=np.uint64)
        s = self.state
        with np.errstate(over="ignore"):
            for k in range(steps):
                s = s ^ (s >> np.uint64(12))
                s = s ^ (s << np.uint64(25))
                s = s ^ (s >> np.uint64(27))
                out[k] = s * _STAR
        self.state = s
        return out.reshape(-1)[:n]

    def uniform(self, n: int = 1, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0**-53)
        return low + (high - low) * u

    def uniform1(self, low: float = 0.0, high: float = 1.0) -> float:
        return float(self.uniform(1, low, high)[0])

    def integer(self, low: int, high: int) -> int:
        """Uniform integer in the closed range [low, high]."""
        span = high - low + 1
        return low + min(int(self.uniform1() * span), span - 1)

    def normal(self, n: int = 1) -> np.ndarray:
        u1 = self.uniform(n)
        u2 = self.uniform(n)
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n) driven by this stream."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.integer(0, i)
            perm[i], perm[j] = perm[j], perm[i]
        return perm
