"""Deterministic parallel reductions over trajectory ensembles.

Trajectories are split into fixed-size blocks independent of the worker
count.  Each block is summed sequentially in index order and the block sums
are folded left to right, so the result bits do not depend on ``workers``.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np

BLOCK = 64
WORKERS_ENV = "QCOLLAPSE_WORKERS"


def resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get(WORKERS_ENV)
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def _blocks(n: int, block: int) -> list[tuple[int, int]]:
    return [(i, min(i + block, n)) for i in range(0, n, block)]


def block_reduce(func: Callable[[int, int], Sequence[np.ndarray]], n: int,
                 workers: int = 1, block: int = BLOCK) -> list[np.ndarray]:
    """Fold ``func(start, stop)`` over consecutive index blocks.

    ``func`` returns a tuple of arrays (partial sums over its block) and must
    be picklable when ``workers > 1``.
    """
    if n < 1:
        raise ValueError("ensemble size must be >= 1")
    spans = _blocks(n, block)
    workers = resolve_workers(workers)
    if workers == 1 or len(spans) == 1:
        parts = (func(a, b) for a, b in spans)
        return _fold(parts)
    with ProcessPoolExecutor(max_workers=min(workers, len(spans))) as pool:
        parts = pool.map(func, [a for a, _ in spans], [b for _, b in spans])
        return _fold(parts)


def _fold(parts) -> list[np.ndarray]:
    total = None
    for part in parts:
        if total is None:
            total = [np.array(p, copy=True) for p in part]
        else:
            for acc, p in zip(total, part):
                acc += p
    return total
