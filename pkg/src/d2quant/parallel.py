"""Thread-count policy.

Work is only ever split across independent sequences and results are merged
in input order, so outputs are identical for any thread count. BLAS is pinned
to one thread so each matrix product has a fixed reduction order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

ENV_VAR = "D2Q_THREADS"


def thread_count() -> int:
    raw = os.environ.get(ENV_VAR, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
    if n < 0:
        raise ValueError(f"{ENV_VAR} must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def map_ordered(fn, items):
    items = list(items)
    n = min(thread_count(), len(items)) or 1
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


@contextmanager
def single_threaded_blas():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield
