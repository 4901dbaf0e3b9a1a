"""Order-preserving process pool used by the simulation and pipeline."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Sequence

WORKERS_ENV = "SPARSEMEANS_WORKERS"


def default_workers() -> int:
    """Worker count from ``SPARSEMEANS_WORKERS``, else the number of CPUs."""
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def parallel_map(fn: Callable, items: Sequence, workers: Optional[int] = None) -> List:
    """``[fn(x) for x in items]``, possibly across processes; output order follows ``items``."""
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items, chunksize=chunk))
