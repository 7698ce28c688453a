"""Worker-pool plumbing shared by the data and evaluation pipelines."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor

WORKERS_ENV_VAR = "HIERDEX_WORKERS"


def resolve_workers(requested: int | None = None) -> int:
    """Worker count: the HIERDEX_WORKERS env var wins, then the requested
    value, then the machine's core count."""
    env = os.environ.get(WORKERS_ENV_VAR)
    if env is not None:
        n = int(env)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV_VAR} must be >= 1, got {n}")
        return n
    if requested is not None:
        if requested < 1:
            raise ValueError(f"worker count must be >= 1, got {requested}")
        return requested
    return os.cpu_count() or 1


def pmap(fn, items, workers: int = 1) -> list:
    """Order-preserving map, in-process when workers <= 1. Results are
    identical at any worker count provided `fn` derives all randomness from
    its argument."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))
