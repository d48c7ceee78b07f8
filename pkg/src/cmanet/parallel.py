"""Order-preserving fan-out of blocking work onto a thread pool."""

import asyncio
import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

from tqdm import tqdm

T = TypeVar("T")
R = TypeVar("R")

TASKS_PER_WORKER = 4

logger = logging.getLogger(__name__)


def run_ordered(
    func: Callable[[T], R],
    items: Sequence[T],
    consume: Callable[[T, R], None],
    workers: int = 1,
    progress: bool = False,
    desc: str = "Working",
) -> None:
    """Apply ``func`` to every item and hand ``(item, result)`` to ``consume``
    strictly in item order.

    With ``workers > 1`` items run in batches of ``workers * TASKS_PER_WORKER``
    concurrent tasks; a batch is consumed before the next one starts, so at
    most one batch of results is held in memory.
    """
    with tqdm(total=len(items), desc=desc, disable=not progress) as bar:
        if workers <= 1:
            for item in items:
                consume(item, func(item))
                bar.update(1)
            return
        asyncio.run(_run_batched(func, items, consume, workers, bar))


async def _run_batched(
    func: Callable[[T], R],
    items: Sequence[T],
    consume: Callable[[T, R], None],
    workers: int,
    bar: tqdm,
) -> None:
    batch_size = workers * TASKS_PER_WORKER
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, len(items), batch_size):
            chunk = items[start : start + batch_size]
            try:
                async with asyncio.TaskGroup() as tg:
                    tasks = [
                        tg.create_task(asyncio.wrap_future(pool.submit(func, item)))
                        for item in chunk
                    ]
            except ExceptionGroup as group:
                # callers handle the worker's own exception type
                raise group.exceptions[0] from None
            for item, task in zip(chunk, tasks):
                consume(item, task.result())
            bar.update(len(chunk))
            logger.debug(f"Finished items {start}..{start + len(chunk) - 1}")
