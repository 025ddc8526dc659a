"""Counter-based random streams keyed by (seed, purpose, indices...).

Every consumer of randomness (weight init, shuffling, dropout, augmentation)
asks for its own stream, so results do not depend on call order across
samples or on how many workers produce them.
"""
from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _purpose_word(purpose: str) -> int:
    return int.from_bytes(hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest(), "little")


def stream_key(seed: int, purpose: str, *indices: int) -> int:
    """Fold the tuple into a 128-bit Philox key."""
    state = splitmix64(int(seed) & _MASK64)
    state = splitmix64(state ^ _purpose_word(purpose))
    for idx in indices:
        state = splitmix64(state ^ (int(idx) & _MASK64))
    hi = splitmix64(state ^ 0xD1B54A32D192ED03)
    return (hi << 64) | state


def rng_stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """Independent generator for one (seed, purpose, *indices) tuple."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, purpose, *indices)))
