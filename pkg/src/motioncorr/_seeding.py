"""Child-seed derivation so that sub-tasks get independent, order-free streams."""

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x):
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def mix_seed(seed, *indices):
    """Fold ``indices`` into ``seed`` one splitmix64 round at a time."""
    h = splitmix64(int(seed) & _MASK)
    for i in indices:
        h = splitmix64(h ^ (int(i) & _MASK))
    return h


def rng_for(seed, *indices):
    return np.random.default_rng(mix_seed(seed, *indices))
