"""Splittable, counter-based pseudo-random keys (Threefry-2x64).

Keys are immutable 2x64-bit values. Splitting a key yields
deterministically-derived child keys, so any tree of hosts / devices /
epochs gets reproducible, statistically independent streams regardless
of the order in which the tree is walked.
"""

from __future__ import annotations

import numpy as np

_C240 = np.uint64(0x1BD11BDAA9FC1A22)
# Rotation schedule for Threefry-2x64, 20 rounds.
_ROT = (16, 42, 12, 31, 16, 32, 24, 21)


def _threefry2x64(k0, k1, x0, x1):
    """Apply the Threefry-2x64 block cipher to counter words (x0, x1)."""
    with np.errstate(over="ignore"):
        ks = (np.uint64(k0), np.uint64(k1), np.uint64(k0) ^ np.uint64(k1) ^ _C240)
        x0 = x0 + ks[0]
        x1 = x1 + ks[1]
        for r in range(20):
            rot = np.uint64(_ROT[r % 8])
            x0 = x0 + x1
            x1 = (x1 << rot) | (x1 >> (np.uint64(64) - rot))
            x1 = x1 ^ x0
            if (r + 1) % 4 == 0:
                d = (r + 1) // 4
                x0 = x0 + ks[d % 3]
                x1 = x1 + ks[(d + 1) % 3] + np.uint64(d)
    return x0, x1


class RngKey:
    """An immutable 2x64-bit random key."""

    __slots__ = ("hi", "lo")

    def __init__(self, hi: int, lo: int):
        self.hi = int(hi) & 0xFFFFFFFFFFFFFFFF
        self.lo = int(lo) & 0xFFFFFFFFFFFFFFFF

    @classmethod
    def from_seed(cls, seed: int) -> "RngKey":
        return cls(0, seed)

    def __repr__(self):
        return f"RngKey({self.hi:#x}, {self.lo:#x})"

    def __eq__(self, other):
        return isinstance(other, RngKey) and (self.hi, self.lo) == (other.hi, other.lo)

    def __hash__(self):
        return hash((self.hi, self.lo))


def split(key: RngKey, n: int) -> list[RngKey]:
    """Derive ``n`` pairwise-distinct child keys from ``key``.

    The cipher is a bijection for a fixed key, so distinct counters map
    to distinct outputs; children never collide with each other.
    """
    if n < 1:
        raise ValueError(f"split needs n >= 1, got {n}")
    ctr = np.arange(n, dtype=np.uint64)
    h, l = _threefry2x64(key.hi, key.lo, ctr, np.full(n, np.uint64(1)))
    return [RngKey(int(h[i]), int(l[i])) for i in range(n)]


def fold_in(key: RngKey, data: int) -> RngKey:
    """Mix an integer (e.g. an epoch number) into a key."""
    h, l = _threefry2x64(
        key.hi, key.lo, np.asarray([data], np.uint64), np.asarray([2], np.uint64)
    )
    return RngKey(int(h[0]), int(l[0]))


def _random_bits(key: RngKey, n: int) -> np.ndarray:
    """n words of 64 random bits from the key's counter stream."""
    half = (n + 1) // 2
    ctr = np.arange(half, dtype=np.uint64)
    h, l = _threefry2x64(key.hi, key.lo, ctr, np.zeros(half, np.uint64))
    return np.concatenate([h, l])[:n]


def uniform(key: RngKey, shape, dtype=np.float64) -> np.ndarray:
    """Uniform samples in [0, 1) with the given shape."""
    n = int(np.prod(shape)) if len(tuple(shape)) else 1
    bits = _random_bits(key, max(n, 1))
    # 53 high bits -> doubles in [0, 1)
    u = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return u[:n].reshape(shape).astype(dtype)


def normal(key: RngKey, shape, dtype=np.float64) -> np.ndarray:
    """Standard normal samples via Box-Muller."""
    n = int(np.prod(shape)) if len(tuple(shape)) else 1
    m = max(n, 1)
    bits = _random_bits(key, 2 * m)
    u1 = (bits[:m] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    u2 = (bits[m:] >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    r = np.sqrt(-2.0 * np.log1p(-u1))  # log1p avoids log(0)
    z = r * np.cos(2.0 * np.pi * u2)
    return z[:n].reshape(shape).astype(dtype)


def randint(key: RngKey, shape, low: int, high: int) -> np.ndarray:
    """Integers uniform over [low, high)."""
    if high <= low:
        raise ValueError("randint needs high > low")
    u = uniform(key, shape)
    return (low + np.floor(u * (high - low))).astype(np.int64)


def permutation(key: RngKey, n: int) -> np.ndarray:
    """A deterministic permutation of range(n) (argsort of a key stream)."""
    return np.argsort(uniform(key, (n,)), kind="stable")
