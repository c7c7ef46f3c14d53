"""Seeded random streams shared by every endpoint.

The generator is SplitMix64 used as a counter-based stream: the i-th 64-bit
word of stream ``seed`` is ``mix64(seed + (i + 1) * GAMMA)``, which is exactly
the i-th output of a SplitMix64 generator whose state starts at ``seed``.
Because each word depends only on (seed, i) the whole stream can be produced
in one vectorised numpy pass, and a client that only knows a seed can
regenerate a perturbation without ever having stored it.

Uniforms take the top 53 bits and are centred in their bucket, so they lie
strictly inside (0, 1). Standard normals come from Box-Muller over consecutive
uniform pairs: pair j yields ``r*cos(2*pi*u2)`` at index 2j and
``r*sin(2*pi*u2)`` at index 2j+1, with ``r = sqrt(-2*ln(u1))``.

The integer arithmetic is bit-exact everywhere. The normals go through the
platform's ``log``/``cos``/``sin``, so bitwise equality across machines holds
only as far as their libm agrees.
"""

from __future__ import annotations

import numpy as np

ALGORITHM_ID = "splitmix64-boxmuller-v1"

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_FOLD_INIT = 0x243F6A8885A308D3

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    """SplitMix64 finaliser on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def derive_seed(*parts: int) -> int:
    """Hash a tuple of non-negative ints into a 64-bit seed.

    Used for per-(iteration, perturbation, side) seeds, e.g.
    ``derive_seed(master_seed, t, q, lane)``.
    """
    h = _FOLD_INIT
    for p in parts:
        if p < 0:
            raise ValueError(f"seed components must be non-negative, got {p}")
        h = mix64(h ^ mix64((p + GAMMA) & MASK64))
    return h


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def raw_words(seed: int, n: int, start: int = 0) -> np.ndarray:
    """Words ``start .. start+n-1`` of the stream as uint64."""
    seed &= MASK64
    counters = np.arange(start + 1, start + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed) + counters * np.uint64(GAMMA)
        return _mix64_array(state)


def uniforms(seed: int, n: int, start: int = 0) -> np.ndarray:
    """Floats in the open interval (0, 1)."""
    words = raw_words(seed, n, start)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2_53


def normals(seed: int, n: int) -> np.ndarray:
    """First ``n`` standard-normal draws of stream ``seed``."""
    if n < 0:
        raise ValueError("n must be non-negative")
    pairs = (n + 1) // 2
    u = uniforms(seed, 2 * pairs)
    u1, u2 = u[0::2], u[1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    angle = _TWO_PI * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(angle)
    out[1::2] = r * np.sin(angle)
    return out[:n]


class PrngStream:
    """Sequential view over a counter-based stream.

    Keeps a position so callers that want "the next k draws" don't have to
    track offsets themselves. Normals are drawn in whole Box-Muller pairs, so
    an odd-length request wastes its last sine.
    """

    algorithm_id = ALGORITHM_ID

    def __init__(self, seed: int):
        self.seed = seed & MASK64
        self.counter = 0

    def uniform(self, n: int) -> np.ndarray:
        out = uniforms(self.seed, n, self.counter)
        self.counter += n
        return out

    def normal(self, n: int) -> np.ndarray:
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[0::2]))
        angle = _TWO_PI * u[1::2]
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = r * np.cos(angle)
        out[1::2] = r * np.sin(angle)
        return out[:n]
