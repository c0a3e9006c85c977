"""Per-service worker pool.

Parallelism is capped by the HUMAS_LAB_THREADS environment variable (default:
all cores).  Tasks must be independent per service; results are re-keyed so
completion order never affects output.
"""

from __future__ import annotations

import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor


def worker_count() -> int:
    env = os.environ.get("HUMAS_LAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def map_keyed(fn, items: dict, workers: int | None = None) -> dict:
    """Apply fn(value) per key, in parallel when possible; returns key->result."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(items) <= 1:
        return {k: fn(v) for k, v in items.items()}
    keys = sorted(items)
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(max_workers=min(workers, len(keys)),
                             mp_context=ctx) as pool:
        results = list(pool.map(fn, [items[k] for k in keys]))
    return dict(zip(keys, results))
