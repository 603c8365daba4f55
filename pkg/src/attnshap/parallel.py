"""Order-preserving fan-out capped by ``ATTNSHAP_THREADS``."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .exceptions import ConfigError

ENV_VAR = "ATTNSHAP_THREADS"


def n_workers():
    """Worker count from ``ATTNSHAP_THREADS`` (default 1, i.e. serial)."""
    raw = os.environ.get(ENV_VAR, "1").strip()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_VAR} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{ENV_VAR} must be a positive integer, got {n}")
    return n


def pmap(fn, items):
    """``list(map(fn, items))`` on a thread pool; results keep input order.

    numpy releases the GIL inside its kernels, so threads give real
    speed-ups on the matrix work done per item.
    """
    items = list(items)
    workers = min(n_workers(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
