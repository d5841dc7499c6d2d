"""Path-chunked execution with a worker-count independent reduction order."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

R = TypeVar("R")

DEFAULT_CHUNK = 4096


def chunk_bounds(n_paths: int, chunk: int = DEFAULT_CHUNK) -> list[tuple[int, int]]:
    # even chunks keep antithetic pairs together
    if chunk % 2:
        chunk += 1
    return [(a, min(a + chunk, n_paths)) for a in range(0, n_paths, chunk)]


def map_chunks(
    fn: Callable[[int, int], R], n_paths: int, workers: int = 1, chunk: int = DEFAULT_CHUNK
) -> list[R]:
    """Apply ``fn(start, stop)`` to every chunk; results come back in chunk order.

    Chunk boundaries depend only on ``n_paths`` and ``chunk``, never on
    ``workers``, so every array operation sees the same shapes whatever the
    worker count and results are bit-identical.
    """
    bounds = chunk_bounds(n_paths, chunk)
    if workers <= 1 or len(bounds) == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))
