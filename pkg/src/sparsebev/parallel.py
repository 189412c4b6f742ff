"""Thread-pool helpers.

Parallel paths only split work whose per-item result does not depend on the
split; final reductions always run serially in a fixed order, so outputs are
bit-identical for any worker count. ``SPARSEBEV_DETERMINISTIC=1`` forces the
serial reference path everywhere.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_DETERMINISTIC = "SPARSEBEV_DETERMINISTIC"


def resolve_threads(threads: int | None) -> int:
    if os.environ.get(ENV_DETERMINISTIC, "") not in ("", "0"):
        return 1
    return max(1, int(threads or 1))


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = 1) -> list[R]:
    """``list(map(fn, items))``, optionally on a thread pool; order is preserved."""
    items = list(items)
    n = resolve_threads(threads)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))


def chunk_bounds(n: int, parts: int) -> list[tuple[int, int]]:
    parts = max(1, min(parts, n)) if n else 1
    edges = [n * i // parts for i in range(parts + 1)]
    return list(zip(edges[:-1], edges[1:]))
