"""Thread-count and determinism controls shared by the command line and scripts."""
from __future__ import annotations

import os
from typing import Optional

import numba
from threadpoolctl import threadpool_limits

ENV_THREADS = "LOCALTRANS_THREADS"

_limiter = None


def default_threads() -> Optional[int]:
    value = os.environ.get(ENV_THREADS)
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ValueError(f"{ENV_THREADS} must be an integer, got {value!r}") from None
    if n < 1:
        raise ValueError(f"{ENV_THREADS} must be positive, got {n}")
    return n


def configure(threads: Optional[int] = None, deterministic: bool = False) -> int:
    """Apply a thread budget to BLAS and the compiled kernels; returns the count in effect.

    Deterministic mode pins everything to one thread so reductions run in a
    fixed order.
    """
    global _limiter
    if deterministic:
        threads = 1
    if threads is None:
        threads = default_threads()
    if threads is None:
        return numba.get_num_threads()
    threads = max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(threads)
    _limiter = threadpool_limits(limits=threads)
    return threads
