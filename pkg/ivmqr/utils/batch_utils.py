"""
Batch utilities for ivmqr

Helpers for chunked, seed-stable work: slicing, parallel map with ordered results,
and accumulation of per-chunk outputs.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

# Rows per simulation chunk; fixed so that results do not depend on the worker count
DEFAULT_CHUNK_SIZE = 25_000


def chunk_slices(total: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> list[slice]:
    """
    Split range(total) into consecutive slices of at most chunk_size.
    """
    if total <= 0:
        return []
    return [slice(start, min(start + chunk_size, total)) for start in range(0, total, chunk_size)]


def spawn_generators(seed: int, count: int) -> list[np.random.Generator]:
    """
    Independent random streams derived from one seed, one per chunk.
    """
    children = np.random.SeedSequence(seed).spawn(count)
    return [np.random.default_rng(child) for child in children]


def run_ordered(
    func: Callable[[Any], Any],
    items: Sequence[Any] | Iterable[Any],
    max_workers: int | None = None,
) -> list:
    """
    Apply func to every item, possibly in parallel, returning results in input order.

    Args:
        func: Pure function of one item
        items: Inputs
        max_workers: Thread cap; 1 (or a single item) runs inline

    Returns:
        List of results, index-aligned with items
    """
    items = list(items)
    if max_workers == 1 or len(items) <= 1:
        return [func(item) for item in items]
    logger.debug("Running %d items on up to %s worker(s)", len(items), max_workers or "default")
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(func, items))


def accumulate_results(existing, new_item):
    """
    Accumulate chunk results into one batch.
    For arrays: concatenates along the first axis.
    For dicts: accumulates key-wise (None values stay None).
    For other types: creates a list.
    """
    if new_item is None:
        return existing

    if existing is None:
        if isinstance(new_item, np.ndarray):
            return new_item.copy()
        if isinstance(new_item, dict):
            return {key: accumulate_results(None, value) for key, value in new_item.items()}
        return [new_item]

    if isinstance(existing, np.ndarray) and isinstance(new_item, np.ndarray):
        if existing.shape[1:] != new_item.shape[1:]:
            raise ValueError(
                f"Cannot accumulate arrays with shapes {existing.shape} and {new_item.shape}"
            )
        return np.concatenate([existing, new_item], axis=0)

    if isinstance(existing, dict) and isinstance(new_item, dict):
        return {
            key: accumulate_results(existing.get(key), new_item.get(key))
            for key in dict.fromkeys([*existing, *new_item])
        }

    if isinstance(existing, list):
        return existing + [new_item]

    return [existing, new_item]
