"""Order-preserving map over independent work items."""

import os
from concurrent.futures import ThreadPoolExecutor

ENV_THREADS = "SPECMOMENT_THREADS"


def resolve_threads(n_threads=None):
    """Explicit value, else ``$SPECMOMENT_THREADS``, else the CPU count."""
    if n_threads is None:
        env = os.environ.get(ENV_THREADS)
        n_threads = int(env) if env else (os.cpu_count() or 1)
    if n_threads < 1:
        raise ValueError("thread count must be positive")
    return n_threads


def pmap(fn, items, n_threads=None):
    items = list(items)
    n_threads = min(resolve_threads(n_threads), max(len(items), 1))
    if n_threads == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        return list(pool.map(fn, items))
