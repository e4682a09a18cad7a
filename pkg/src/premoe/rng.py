"""Deterministic, language-neutral pseudo-random streams.

Everything random in this package comes from SplitMix64 so that any
reimplementation (in any language) can reproduce scores, weights and inputs
bit-for-bit from a 64-bit seed.

SplitMix64 (Steele, Lea & Flood 2014), output i (0-based) for seed s:

    x = (s + (i + 1) * 0x9E3779B97F4A7C15) mod 2^64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) mod 2^64
    out_i = x ^ (x >> 31)

Derived conventions used here:

* uniform in [0, 1):  out_i >> 11, scaled by 2^-53
* standard normals:   Box-Muller on consecutive uniform pairs (u1, u2), with
  u1 mapped into (0, 1] as ((out >> 11) + 1) * 2^-53;
  z0 = sqrt(-2 ln u1) cos(2 pi u2), z1 = sqrt(-2 ln u1) sin(2 pi u2)
* sub-streams:        derive(seed, *parts) folds integer parts into the seed
  via s <- mix64(s XOR mix64(part + GOLDEN)), where mix64 is the SplitMix64
  finalizer above (without the counter increment).

The counter-based form makes every stream O(1)-seekable, so generated
sequences are prefixes of longer ones drawn from the same seed.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB


def mix64(x: int) -> int:
    """SplitMix64 finalizer on a single 64-bit integer."""
    x &= MASK64
    x = ((x ^ (x >> 30)) * _MIX_A) & MASK64
    x = ((x ^ (x >> 27)) * _MIX_B) & MASK64
    return x ^ (x >> 31)


def derive(seed: int, *parts: int) -> int:
    """Fold integer tags into a seed to obtain an independent sub-stream seed."""
    s = seed & MASK64
    for p in parts:
        s = mix64(s ^ mix64((int(p) + GOLDEN) & MASK64))
    return s


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` raw 64-bit outputs of SplitMix64 for ``seed`` (vectorized)."""
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    idx = np.arange(1, n + 1, dtype=np.uint64)
    x = (np.uint64(seed & MASK64) + idx * np.uint64(GOLDEN)).astype(np.uint64)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX_A)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX_B)
    return x ^ (x >> np.uint64(31))


def uniforms(seed: int, n: int) -> np.ndarray:
    """``n`` doubles uniform in [0, 1), as float64."""
    return (splitmix64(seed, n) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def normals(seed: int, n: int) -> np.ndarray:
    """``n`` standard-normal doubles via Box-Muller on uniform pairs."""
    m = (n + 1) // 2
    raw = splitmix64(seed, 2 * m)
    # u1 in (0, 1] so log() is finite; u2 in [0, 1).
    u1 = ((raw[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (raw[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.empty(2 * m, dtype=np.float64)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:n]
