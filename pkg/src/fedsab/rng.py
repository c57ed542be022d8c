"""Deterministic RNG streams keyed by (seed, round, client, purpose)."""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def mix64(z: int) -> int:
    """SplitMix64 finalizer."""
    z = (z + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h = ((h ^ byte) * 0x100000001B3) & MASK64
    return h


def _key_words(keys) -> list[int]:
    words = []
    for k in keys:
        if isinstance(k, (int, np.integer)):
            words.append(int(k) & MASK64)
        else:
            digest = hashlib.blake2b(str(k).encode("utf-8"), digest_size=8).digest()
            words.append(int.from_bytes(digest, "little"))
    return words


def derive_seed(seed: int, *keys) -> int:
    h = mix64(int(seed) & MASK64)
    for w in _key_words(keys):
        h = mix64(h ^ w)
    return h


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent generator for one purpose; order of use elsewhere cannot
    perturb it."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))
