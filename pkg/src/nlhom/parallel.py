"""Deterministic chunked reductions, optionally spread over worker threads.

All xi/z double sums in this package reduce over lattice-node chunks of a
fixed size.  Partial sums are produced per chunk (in parallel if NLHOM_THREADS
asks for it) and combined in chunk order with Kahan compensation, so results
are bit-identical for any worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK = 128  # lattice nodes per chunk; fixed so the partition never changes

_ENV_VAR = "NLHOM_THREADS"


def worker_count():
    """Worker threads requested via the environment (default 1)."""
    raw = os.environ.get(_ENV_VAR, "1")
    try:
        count = int(raw)
    except ValueError:
        return 1
    return max(1, count)


def node_chunks(count, chunk=CHUNK):
    """Fixed partition of range(count) into slices of length <= chunk."""
    return [slice(lo, min(lo + chunk, count)) for lo in range(0, count, chunk)]


def kahan_combine(partials):
    """Sum an ordered sequence of arrays/scalars with Kahan compensation."""
    total = None
    comp = None
    for p in partials:
        p = np.asarray(p, dtype=float)
        if total is None:
            total = p.copy()
            comp = np.zeros_like(total)
            continue
        y = p - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total


def map_chunks(fn, slices):
    """Apply ``fn`` to each slice; parallel when more than one worker is set.

    Results come back in slice order regardless of scheduling, so downstream
    combination is deterministic.
    """
    workers = worker_count()
    if workers <= 1 or len(slices) <= 1:
        return [fn(sl) for sl in slices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, slices))


def chunked_sum(fn, count, chunk=CHUNK):
    """Deterministic sum of ``fn(slice)`` over a fixed chunking of range(count)."""
    slices = node_chunks(count, chunk)
    if not slices:
        raise ValueError("chunked_sum needs at least one element")
    return kahan_combine(map_chunks(fn, slices))
