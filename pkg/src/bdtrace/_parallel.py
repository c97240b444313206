"""Per-path random streams and order-independent batch execution."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

# stream identifiers keep independent experiments on disjoint spawn keys
STREAM_TRACE = 1
STREAM_PATH = 2
STREAM_SUBORD = 3
STREAM_KILL = 4
STREAM_LAPLACE = 5
STREAM_HIT = 6
STREAM_INSTANT = 7
STREAM_VISIT = 8
STREAM_RHO = 9
STREAM_DOOB = 10


def path_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for one path, derived from (seed, key) only."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def default_threads() -> int:
    env = os.environ.get("BD_TRACE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def run_batches(work: Callable[[int, int], None], n: int, threads: int | None = None,
                chunk: int = 256) -> None:
    """Call work(start, stop) over [0, n) in fixed chunks.

    ``work`` must write its results by path index, so the outcome does not
    depend on the number of threads or on scheduling.
    """
    threads = default_threads() if threads is None else max(1, int(threads))
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads == 1 or len(bounds) <= 1:
        for s, e in bounds:
            work(s, e)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for f in [pool.submit(work, s, e) for s, e in bounds]:
            f.result()
