"""Deterministic chunked thread maps.

Work is split into fixed chunks (independent of worker count) and results are
gathered in submission order, so outputs are bit-identical for any
``--threads`` value; threads only change wall time.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

_WORKERS = 1


def set_workers(n: int):
    global _WORKERS
    _WORKERS = max(1, int(n))


def get_workers() -> int:
    return _WORKERS


def parallel_map(fn, items):
    """Map preserving order; runs on the configured worker count."""
    items = list(items)
    if _WORKERS <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(_WORKERS, len(items))) as pool:
        return list(pool.map(fn, items))


def chunk_ranges(n: int, chunk: int):
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
