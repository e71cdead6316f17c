"""Seed derivation shared by every random stream in the package.

All randomness flows from one integer base seed. Each consumer asks for a
stream by ``(base_seed, tag, index)``; the three are mixed with SplitMix64
into a 64-bit seed which then initializes a numpy ``PCG64`` generator.

Mixing scheme (stable across releases, recorded in run manifests)::

    h = splitmix64(base_seed XOR fnv1a64(tag))
    seed = splitmix64(h + index * 0x9E3779B97F4A7C15)
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

SEED_SCHEME = "splitmix64(base^fnv1a64(tag)); splitmix64(h+index*golden) -> PCG64"


def splitmix64(x):
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def fnv1a64(text):
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(base_seed, tag, index=0):
    """Return the 64-bit seed for stream ``tag``/``index`` under ``base_seed``."""
    h = splitmix64((int(base_seed) & MASK64) ^ fnv1a64(tag))
    return splitmix64((h + int(index) * GOLDEN) & MASK64)


def generator(base_seed, tag, index=0):
    return np.random.Generator(np.random.PCG64(derive_seed(base_seed, tag, index)))
