"""Process-pool execution of independent work items, driven from asyncio.

Items are submitted to a ProcessPoolExecutor through ``loop.run_in_executor``;
results are released to the sink strictly in item order, so downstream writers
see the same sequence regardless of which worker finished first.
"""

import asyncio
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from typing import TypeVar

from batchmiss.log import debug_event

logger = logging.getLogger("batchmiss.pool")

T = TypeVar("T")
R = TypeVar("R")

# Called with (item index, result) in item order
Sink = Callable[[int, R], None]


async def map_ordered(
    func: Callable[[T], R],
    items: Sequence[T],
    workers: int = 1,
    sink: Sink | None = None,
) -> list[R]:
    """Apply ``func`` to every item and return the results in item order.

    ``func`` and the items must be picklable when ``workers > 1``. With a single
    worker everything runs inline in the calling process.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")

    results: list[R] = []
    if workers == 1 or len(items) <= 1:
        for index, item in enumerate(items):
            result = func(item)
            if sink is not None:
                sink(index, result)
            results.append(result)
        return results

    loop = asyncio.get_running_loop()
    debug_event(logger, "pool_start", "Starting process pool", workers=workers, items=len(items))
    with ProcessPoolExecutor(max_workers=workers) as executor:
        futures = [loop.run_in_executor(executor, func, item) for item in items]
        try:
            for index, future in enumerate(futures):
                result = await future
                if sink is not None:
                    sink(index, result)
                results.append(result)
        except BaseException:
            for future in futures:
                future.cancel()
            raise
    return results


def run_ordered(
    func: Callable[[T], R],
    items: Sequence[T],
    workers: int = 1,
    sink: Sink | None = None,
) -> list[R]:
    """Synchronous wrapper around :func:`map_ordered` for non-async callers."""
    return asyncio.run(map_ordered(func, items, workers, sink))
