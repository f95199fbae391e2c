"""Frozen deterministic random number generation.

All randomness in the package (noise, crop positions, parameter
initialisation) comes from this module so that results are bit-exact
across runs and platforms.  The algorithm is fixed and must not change:

* state: xoshiro256** (Blackman & Vigna), four 64-bit words;
* seeding: the four words are successive outputs of splitmix64 started
  at the user seed;
* uniforms: ``(x >> 11) * 2**-53`` on the raw 64-bit output, in [0, 1);
* integers in ``[0, n)``: ``(x * n) >> 64`` (multiply-high);
* normals: Box-Muller on consecutive uniform pairs ``(a, b)`` with
  ``r = sqrt(-2 log(1 - a))``, yielding ``r cos(2 pi b)`` then
  ``r sin(2 pi b)``.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z):
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(state):
    """Advance a splitmix64 state; return ``(new_state, output)``."""
    state = (state + _GOLDEN) & MASK64
    return state, _mix64(state)


def derive_seed(seed, *keys):
    """Hash a master seed and integer keys into an independent sub-seed."""
    h = _mix64((seed & MASK64) ^ _GOLDEN)
    for k in keys:
        h = _mix64((h + _GOLDEN * ((int(k) & MASK64) + 1)) & MASK64)
    return h


class Xoshiro256:
    """xoshiro256** generator seeded through splitmix64."""

    def __init__(self, seed):
        if not isinstance(seed, (int, np.integer)):
            raise TypeError("seed must be an integer")
        sm = int(seed) & MASK64
        s = []
        for _ in range(4):
            sm, out = splitmix64(sm)
            s.append(out)
        self._s = s

    @classmethod
    def from_state(cls, state):
        """Build a generator with an explicit four-word state (for testing)."""
        if len(state) != 4 or not any(state):
            raise ValueError("state must be four words, not all zero")
        g = cls.__new__(cls)
        g._s = [int(w) & MASK64 for w in state]
        return g

    def next_u64(self):
        s0, s1, s2, s3 = self._s
        x = (s1 * 5) & MASK64
        result = ((((x << 7) | (x >> 57)) & MASK64) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self._s = [s0, s1, s2, s3]
        return result

    def u64(self, size):
        """``size`` raw 64-bit outputs as a uint64 array."""
        # inlined copy of next_u64; this loop dominates noise generation
        s0, s1, s2, s3 = self._s
        out = [0] * size
        for k in range(size):
            x = (s1 * 5) & MASK64
            out[k] = ((((x << 7) | (x >> 57)) & MASK64) * 9) & MASK64
            t = (s1 << 17) & MASK64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & MASK64
        self._s = [s0, s1, s2, s3]
        return np.array(out, dtype=np.uint64)

    def uniform(self, size):
        """Doubles in [0, 1)."""
        return (self.u64(size) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def integer(self, n):
        """A single integer in ``[0, n)``."""
        if n < 1:
            raise ValueError("n must be positive")
        return (self.next_u64() * n) >> 64

    def normal(self, size):
        """``size`` standard normal samples (Box-Muller)."""
        pairs = (size + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        phase = 2.0 * math.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(phase)
        z[:, 1] = r * np.sin(phase)
        return z.ravel()[:size]
