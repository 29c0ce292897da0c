"""Worker-thread cap for per-sample inference fan-out.

REPTRAIN_THREADS sets the maximum worker count (default 1, i.e. fully
sequential).  Results are always assembled in input order, so the thread
count never changes any output.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    raw = os.environ.get("REPTRAIN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def map_ordered(fn, items: list) -> list:
    """Apply fn to each item, preserving order; threaded only when
    REPTRAIN_THREADS allows more than one worker."""
    workers = worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
