"""Bounded worker-pool helper for member training and chain sampling."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

__all__ = ["parallel_map"]


def parallel_map(fn, tasks, jobs: int = 1) -> list:
    """Apply ``fn`` over ``tasks``, preserving order.

    With ``jobs > 1`` the work runs in a process pool; results still come
    back in task order, so outputs are identical to the sequential path.
    """
    tasks = list(tasks)
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))
