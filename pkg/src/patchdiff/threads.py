"""Worker-pool sizing and deterministic chunked execution.

PATCHDIFF_THREADS caps the package's own worker threads (default 1). Work is
always split into fixed-size chunks whose boundaries do not depend on the
worker count, and workers write to disjoint preallocated slices, so results
are bitwise identical no matter how many threads run.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

__all__ = ["worker_count", "map_chunks", "CHUNK"]

CHUNK = 128  # items per chunk; fixed so GEMM shapes never depend on thread count


def worker_count() -> int:
    raw = os.environ.get("PATCHDIFF_THREADS", "")
    if not raw.strip():
        return 1
    try:
        n = int(raw)
    except ValueError as e:
        raise ValueError(f"PATCHDIFF_THREADS must be an integer, got {raw!r}") from e
    if n < 1:
        raise ValueError(f"PATCHDIFF_THREADS must be >= 1, got {n}")
    return n


def map_chunks(fn, n_items: int, chunk: int = CHUNK) -> None:
    """Call fn(start, stop) over [0, n_items) in fixed chunks, possibly threaded."""
    spans = [(i, min(i + chunk, n_items)) for i in range(0, n_items, chunk)]
    workers = worker_count()
    if workers <= 1 or len(spans) <= 1:
        for a, b in spans:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for _ in pool.map(lambda span: fn(*span), spans):
            pass
