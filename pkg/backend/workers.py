"""Run per-instance work on a small thread pool with ordered results.

numpy releases the GIL inside its kernels, so chunks of instances can be
processed concurrently. Results always come back in chunk order.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

# Process-wide worker count; 0 means one per CPU. Updated by configure_workers.
THREADS = 0


def configure_workers(config: dict) -> None:
    """Configure the default worker count from the application config."""
    global THREADS
    THREADS = int(config.get("threads", 0) or 0)


def resolve_workers(threads: Optional[int] = None) -> int:
    n = THREADS if threads is None else threads
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, n)


# Fixed chunk size: results depend only on the data, never on the worker count.
CHUNK_ROWS = 128


def split_rows(n_rows: int, chunk_rows: int = CHUNK_ROWS) -> List[slice]:
    """Contiguous row ranges of at most ``chunk_rows`` rows."""
    return [slice(lo, min(lo + chunk_rows, n_rows)) for lo in range(0, n_rows, chunk_rows)]


def map_ordered(fn: Callable[[T], R], items: Sequence[T], workers: int = 1) -> List[R]:
    """Apply ``fn`` to every item, concurrently when workers > 1, keeping order."""
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
