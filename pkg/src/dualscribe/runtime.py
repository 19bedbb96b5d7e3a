"""Worker-pool helper honoring the DUALSCRIBE_THREADS cap."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import DataError

THREADS_ENV = "DUALSCRIBE_THREADS"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise DataError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise DataError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def parallel_map(fn, items):
    """Map a pure function over items, preserving input order in the result.

    Results are collected in submission order, so the reduction downstream
    is deterministic regardless of scheduling.
    """
    items = list(items)
    workers = worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
