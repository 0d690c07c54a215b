"""
workers.py
Thread-pool helpers used for loading assets and for evaluation.

Results always come back in submission order so a run is reproducible at any
thread count; with one thread everything runs inline on the caller's thread.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

from errors import UsageError

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")
A = TypeVar("A")

THREADS_ENV = "MESHMARK_THREADS"


def thread_count(default: int = 1) -> int:
    """Worker-pool size from MESHMARK_THREADS (default 1 = serial)."""
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV}={raw!r} is not an integer") from None
    if value < 1:
        raise UsageError(f"{THREADS_ENV} must be >= 1, got {value}")
    return value


def parallel_map(fn: Callable[[T], R], items: Iterable[T], num_threads: int = 1) -> list[R]:
    """Apply `fn` to every item; the i-th result belongs to the i-th item."""
    items = list(items)
    if num_threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(num_threads, len(items))) as executor:
        futures = [executor.submit(fn, item) for item in items]
        return [future.result() for future in futures]


def _chunks(items: Sequence[T], num_chunks: int) -> list[Sequence[T]]:
    chunk_size = len(items) // num_chunks
    chunks = []
    for i in range(num_chunks):
        start = i * chunk_size
        end = None if i == num_chunks - 1 else (i + 1) * chunk_size
        chunks.append(items[start:end])
    return chunks


def parallel_map_reduce(
    items: Sequence[T],
    map_fn: Callable[[Sequence[T]], A],
    reduce_fn: Callable[[list[A]], R],
    num_threads: int = 1,
) -> R:
    """
    Split `items` into `num_threads` contiguous chunks, map each chunk on its
    own worker and reduce the per-chunk results in chunk order.
    """
    num_chunks = max(1, min(num_threads, len(items)))
    chunks = _chunks(items, num_chunks)
    logger.debug("map-reduce over %d items in %d chunks", len(items), num_chunks)
    return reduce_fn(parallel_map(map_fn, chunks, num_threads))
