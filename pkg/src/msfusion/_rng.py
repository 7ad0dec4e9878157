"""SplitMix64 stream splitting.

Every random draw in the package goes through ``derive_seed`` so each
purpose (scene layout, offsets, per-scale noise, codebook init...) owns an
independent stream; changing one never shifts another.
"""
import hashlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(state):
    """Advance a SplitMix64 state; return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


def _key_to_int(key):
    if isinstance(key, (int, np.integer)):
        return int(key) & _MASK
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_seed(seed, *keys):
    """Derive a 64-bit child seed from ``seed`` and a path of keys."""
    state = int(seed) & _MASK
    state, out = splitmix64(state)
    for key in keys:
        state, out = splitmix64(state ^ _key_to_int(key))
    return out


def generator(seed, *keys):
    return np.random.default_rng(derive_seed(seed, *keys))
