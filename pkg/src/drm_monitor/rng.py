"""Deterministic splittable random streams.

Every stochastic routine in the package draws from a stream that is a
pure function of a 64-bit user seed and a small integer path, so that
replicate ``b`` of any resampling scheme is reproducible in isolation
and results never depend on scheduling or execution order.
"""

import numpy as np


def rng_for(seed, *path):
    """Return a Generator keyed on (seed, path); same inputs, same stream."""
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path)))


def derive_seed(seed, *path):
    """Derive a new 64-bit seed as a pure function of (seed, path)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, np.uint64)[0])
