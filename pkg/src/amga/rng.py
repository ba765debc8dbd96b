"""Portable, explicitly seeded pseudo-random generator.

The generator is SplitMix64 (Steele, Lea & Flood 2014, the java.util
SplittableRandom finalizer) used in counter mode: draw i of a stream with
seed s is ``mix64(s + (i+1) * GAMMA)`` with the golden-ratio gamma
0x9E3779B97F4A7C15.  Counter mode makes bulk draws a single vectorized
uint64 expression, so the same seed yields the same stream on every
platform and numpy version, independent of how many values are taken per
call.

Derived streams (``derive``) hash string labels into the seed with the
same mixer, giving deterministic, independent substreams for datasets,
model inits, episodes, and so on.  No global state anywhere: every caller
owns its Rng.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64
_TWO53 = float(1 << 53)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


class Rng:
    """SplitMix64 counter stream with explicit state (seed, counter)."""

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = _U64(seed & 0xFFFFFFFFFFFFFFFF)
        self.counter = _U64(counter)

    def clone(self) -> "Rng":
        return Rng(int(self.seed), int(self.counter))

    def derive(self, *labels) -> "Rng":
        """Deterministic child stream; labels may be strings or ints."""
        with np.errstate(over="ignore"):
            z = self.seed
            for label in labels:
                if isinstance(label, str):
                    data = label.encode("utf-8")
                else:
                    data = int(label).to_bytes(8, "little", signed=False)
                for byte in data:
                    z = _mix64((z + _GAMMA) ^ _U64(byte))
        return Rng(int(z))

    def next_u64(self, n: int = 1) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64) + self.counter
            out = _mix64(self.seed + idx * _GAMMA)
            self.counter = self.counter + _U64(n)
        return out

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0):
        """Uniform floats in [low, high); scalar when shape is None."""
        n = 1 if shape is None else int(np.prod(shape))
        u = (self.next_u64(n) >> _U64(11)).astype(np.float64) / _TWO53
        out = low + (high - low) * u
        if shape is None:
            return float(out[0])
        return out.reshape(shape)

    def normal(self, shape=None):
        """Standard normals via Box-Muller; scalar when shape is None."""
        n = 1 if shape is None else int(np.prod(shape))
        m = (n + 1) // 2
        u = self.next_u64(2 * m)
        # u1 in (0, 1] so log never sees zero
        u1 = ((u[:m] >> _U64(11)).astype(np.float64) + 1.0) / _TWO53
        u2 = (u[m:] >> _U64(11)).astype(np.float64) / _TWO53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        if shape is None:
            return float(z[0])
        return z.reshape(shape)

    def randint(self, bound: int) -> int:
        """Integer in [0, bound); modulo reduction (bias < bound / 2**64)."""
        if bound <= 0:
            raise ValueError(f"randint bound must be positive, got {bound}")
        return int(self.next_u64(1)[0] % _U64(bound))

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via u64 sort keys."""
        keys = self.next_u64(n)
        return np.argsort(keys, kind="stable")

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        if k > n:
            raise ValueError(f"cannot draw {k} distinct items from {n}")
        return self.permutation(n)[:k]
