"""Worker-count control for the data-parallel kernels.

Rays are partitioned into `workers` fixed blocks with private gradient
buffers merged in block order, so results are bit-deterministic for a
fixed worker count. workers=1 is the deterministic reference path.
"""

from __future__ import annotations

import os

import numba

_workers = 1


def set_threads(n: int) -> int:
    """Set the worker count; n <= 0 selects the machine's CPU count."""
    global _workers
    if n <= 0:
        n = os.cpu_count() or 1
    n = max(1, int(n))
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    _workers = n
    return n


def get_threads() -> int:
    return _workers
