"""Counter-based deterministic random numbers for rendering.

Every variate is a pure function of (global seed, pixel, sample, bounce,
purpose, draw), so gradient passes can replay the exact forward streams and
results are independent of thread count and evaluation order. The antithetic
pass id deliberately does NOT enter the stream: both passes consume identical
variates and differ only in how the specular half vector is used.
"""

from __future__ import annotations

import numpy as np
from numba import njit

U64 = np.uint64
_GAMMA = U64(0x9E3779B97F4A7C15)
_M1 = U64(0xBF58476D1CE4E5B9)
_M2 = U64(0x94D049BB133111EB)
_C_PIXEL = U64(0xD6E8FEB86659FD93)
_C_SAMPLE = U64(0xCA01F9DD44C5E9B3)
_C_BOUNCE = U64(0x9FB21C651E98DF25)
_C_PURPOSE = U64(0xC2B2AE3D27D4EB4F)
_C_DRAW = U64(0x165667B19E3779F9)
_INV_2_53 = 1.0 / 9007199254740992.0  # 2^-53

# purpose codes
P_PIXEL_JITTER = 0
P_LOBE = 1
P_BSDF = 2
P_LIGHT = 3
P_RR = 4
P_EDGE = 5


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> U64(30))) * _M1
    z = (z ^ (z >> U64(27))) * _M2
    return z ^ (z >> U64(31))


@njit(cache=True, inline="always")
def rand_u01(seed, pixel, sample, bounce, purpose, draw):
    """Uniform double in [0, 1) keyed on the full counter tuple."""
    z = U64(seed) + _GAMMA
    z = _mix(z ^ (U64(pixel) * _C_PIXEL))
    z = _mix(z ^ (U64(sample) * _C_SAMPLE))
    z = _mix(z ^ (U64(bounce) * _C_BOUNCE))
    z = _mix(z ^ (U64(purpose) * _C_PURPOSE))
    z = _mix(z ^ (U64(draw) * _C_DRAW))
    return float(z >> U64(11)) * _INV_2_53


_SHIFT_SENTINEL = 0x7FFFFFFFFFFF  # never a real sample index


@njit(cache=True, inline="always")
def _radical_inverse(base, n):
    inv = 1.0 / base
    result = 0.0
    f = inv
    while n > 0:
        result += (n % base) * f
        n //= base
        f *= inv
    return result


@njit(cache=True, inline="always")
def rand_ld(seed, pixel, sample, bounce, purpose, draw, base):
    """Low-discrepancy variant of :func:`rand_u01`: radical inverse of the
    sample index (one prime base per dimension) plus a per-pixel random
    rotation. Stratifies the first-bounce integrals across a pixel's samples
    while remaining a pure function of the counter key."""
    shift = rand_u01(seed, pixel, _SHIFT_SENTINEL, bounce, purpose, draw)
    u = _radical_inverse(base, sample) + shift
    if u >= 1.0:
        u -= 1.0
    return u
