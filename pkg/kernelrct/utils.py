import logging
import os

from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, List, Sequence

import numpy as np

log = logging.getLogger(__name__)

THREADS_ENV = "KERNEL_RCT_THREADS"


def chunks(items:Sequence[Any], n:int):
    """Yield successive n-sized chunks from items. Reference: https://stackoverflow.com/a/312464"""
    for i in range(0, len(items), n):
        yield items[i:i + n]


def thread_count(default:int=1) -> int:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return default
    try:
        count = int(value)
    except ValueError:
        log.warning("Ignoring %s=%r: not an integer", THREADS_ENV, value)
        return default
    return max(1, count)


def child_seeds(seed:int, count:int, *key:int) -> List[np.random.SeedSequence]:
    """Per-replicate seed streams, derived from (seed, *key) by counter."""
    return np.random.SeedSequence([int(seed), *[int(k) for k in key]]).spawn(count)


def ordered_map(func:Callable[[Any], Any], items:Iterable[Any], threads:int=None) -> List[Any]:
    """Map over items, possibly in a thread pool; results always come back in input order."""
    items = list(items)
    threads = thread_count() if threads is None else threads
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def ordered_sum(values:Iterable[float]) -> float:
    # numpy reduces float arrays pairwise, the result only depends on the order
    return float(np.sum(np.fromiter(values, dtype=float)))


# vim: set et sw=4 ts=4:
