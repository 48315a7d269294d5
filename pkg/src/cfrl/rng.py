"""Deterministic random-stream derivation.

Every stream is ``PCG64(SeedSequence(master_seed, spawn_key=key))`` where
``key`` is a tuple of non-negative integers naming the stream, e.g.
``(iteration, episode_chunk)``.  Two calls with the same seed and key give
the same stream on every host, so work can be split across any number of
workers without changing results.
"""

import numpy as np

# stream-name tags; keep stable, they are part of the reproducibility contract
DATA = 1
EVAL = 2
SEARCH = 3
VERIFY = 4


def stream(seed, *key):
    """Return the generator for stream ``key`` under ``seed``."""
    if seed is None:
        raise ValueError("a seed is required")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def child_seed(rng):
    """Draw a fresh 63-bit seed from ``rng`` for nested streams."""
    return int(rng.integers(0, 2**63 - 1))
