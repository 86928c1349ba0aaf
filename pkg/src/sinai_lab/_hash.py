"""Counter-based randomness shared by environments and walk kernels.

Every random number in the library is ``mix(key + GOLDEN * counter)`` for a
64-bit stream key, so any draw can be recomputed from (key, counter) alone.
"""

import numba
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

# stream-kind tags used when deriving keys from a master seed
ENV_TAG = 0x454E56
WALK_TAG = 0x57414C4B
COUPLING_TAG = 0x434F5550


@numba.njit(cache=True, inline="always")
def mix64(z):
    """splitmix64 finalizer on a uint64."""
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@numba.njit(cache=True, inline="always")
def uniform(key, counter):
    """Uniform double in [0, 1) for draw number ``counter`` of stream ``key``."""
    z = mix64(np.uint64(key) + GOLDEN * np.uint64(counter))
    return np.float64(z >> _S11) * _INV53


@numba.njit(cache=True)
def _stream_key(seed, tag):
    return mix64(mix64(seed) ^ (GOLDEN * (tag + np.uint64(1))))


def stream_key(seed: int, tag: int) -> np.uint64:
    """64-bit key of the stream ``tag`` under ``seed``."""
    return np.uint64(_stream_key(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF), np.uint64(int(tag) & 0xFFFFFFFFFFFFFFFF)))


def derive_seed(*words: int) -> int:
    """Deterministic 64-bit seed from a tuple of nonnegative integers."""
    ss = np.random.SeedSequence([int(w) for w in words])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
