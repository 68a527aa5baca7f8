"""Deterministic SplitMix64 stream used by the synthetic generator and drift plans.

Every random byte in this package comes from SplitMix64 so that independent
reimplementations can reproduce outputs exactly. The contract:

* state update: ``state += 0x9E3779B97F4B7C15`` (mod 2**64), output is
  ``mix64(state)`` with the published finalizer constants
  0xBF58476D1CE4E5B9 and 0x94D049BB133111EB.
* multi-word seeding folds words left to right:
  ``state0 = 0; state0 = mix64(state0 + word + GAMMA) for each word``.
* uniform doubles: ``((x >> 11) + 1) * 2**-53`` in (0, 1].
* standard normals: Box-Muller on consecutive uniform pairs (u1, u2):
  ``r = sqrt(-2 ln u1)``, ``z0 = r cos(2 pi u2)``, ``z1 = r sin(2 pi u2)``;
  a block of n normals consumes ceil(n/2) pairs, interleaved
  [z0_0, z1_0, z0_1, ...] and truncated to n. Pairs are never cached
  across blocks.
"""

from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
GAMMA = 0x9E3779B97F4B7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """SplitMix64 output finalizer on a 64-bit word."""
    z &= 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * _MUL1) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * _MUL2) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def derive_seed(*words: int) -> int:
    """Fold one or more seed words into a single SplitMix64 starting state."""
    state = 0
    for w in words:
        state = mix64((state + (int(w) & 0xFFFFFFFFFFFFFFFF) + GAMMA) & 0xFFFFFFFFFFFFFFFF)
    return state


class SplitMix64:
    """Sequential SplitMix64 generator with vectorized block draws.

    The k-th output equals ``mix64(seed + k*GAMMA)``, so block draws are
    computed with numpy uint64 arithmetic and are bit-identical to calling
    :meth:`next_u64` k times.
    """

    def __init__(self, seed: int):
        self._state = int(seed) & 0xFFFFFFFFFFFFFFFF

    def next_u64(self) -> int:
        self._state = (self._state + GAMMA) & 0xFFFFFFFFFFFFFFFF
        return mix64(self._state)

    def u64_block(self, n: int) -> np.ndarray:
        """Next *n* raw outputs as a uint64 array."""
        if n < 0:
            raise ValueError("n must be non-negative")
        ks = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self._state) + ks * np.uint64(GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
            z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * GAMMA) & 0xFFFFFFFFFFFFFFFF
        return z

    def uniform_block(self, n: int) -> np.ndarray:
        """Next *n* uniforms in (0, 1] as float64."""
        bits = self.u64_block(n)
        return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53

    def normal_block(self, n: int) -> np.ndarray:
        """Next *n* standard normals (Box-Muller, fixed pair order)."""
        if n == 0:
            return np.empty(0, dtype=np.float64)
        pairs = (n + 1) // 2
        u = self.uniform_block(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * np.pi) * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]
