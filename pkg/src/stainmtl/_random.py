"""Seedable, splittable random streams.

Every stream is a counter-based Philox generator keyed by a root seed and a
tuple of integers (the spawn key). Streams for different keys are
statistically independent, so per-sample draws do not depend on the order
in which samples are processed.
"""

import numbers

import numpy as np


def make_rng(seed, *key):
    """Return a ``numpy.random.Generator`` for ``(seed, key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed, *key):
    """Derive a 63-bit child seed, suitable for logging and replay."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def check_random_state(random_state):
    """Turn ``random_state`` into a Generator.

    None gives seed 0 (the package never draws from OS entropy), an int is
    used as root seed, and an existing Generator is passed through.
    """
    if random_state is None:
        return make_rng(0)
    if isinstance(random_state, np.random.Generator):
        return random_state
    if isinstance(random_state, numbers.Integral):
        return make_rng(random_state)
    raise ValueError(f"{random_state!r} cannot be used to seed a Generator")
