"""Chunked work splitting whose results never depend on the worker count.

Work is cut into fixed-size chunks, each chunk gets its own random stream
keyed by its index, and results are put back together in chunk order.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK = 4096


def chunks(n, size=CHUNK):
    return [(lo, min(n, lo + size)) for lo in range(0, n, size)]


def pmap(fn, items, workers=1):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def seed_of(rng):
    """Accept an integer seed or a ``numpy`` generator and return an integer seed."""
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**63 - 1))
    raise TypeError("expected an integer seed or a numpy Generator")
