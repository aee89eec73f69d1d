"""
Deterministic parallel trials.

Each task gets its own integer seed spawned from one root SeedSequence, and
results come back in task order, so outputs do not depend on the thread count.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

T = TypeVar("T")


def default_threads() -> int:
    value = os.getenv("OFFLINE_RL_THREADS")
    if value is None:
        return 1
    try:
        return max(1, int(value))
    except ValueError:
        logger.warning(f"⚠️ Ignoring OFFLINE_RL_THREADS={value!r}; using 1 worker")
        return 1


def spawn_seeds(seed: Optional[int], count: int) -> List[int]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in children]


def map_trials(fn: Callable[[int, int], T], count: int, seed: Optional[int],
               threads: Optional[int] = None) -> List[T]:
    """Run fn(index, task_seed) for every task; results are ordered by index."""
    seeds = spawn_seeds(seed, count)
    threads = threads or default_threads()
    if threads == 1 or count <= 1:
        return [fn(i, s) for i, s in enumerate(seeds)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(count), seeds))
