import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Tuple

import numpy


def chunk_bounds(count: int, chunk: int) -> List[Tuple[int, int]]:
    """Split ``range(count)`` into consecutive ``[lo, hi)`` blocks."""
    return [(lo, min(lo + chunk, count)) for lo in range(0, count, chunk)]


def map_chunks(kernel: Callable[[int, int], numpy.ndarray], count: int, chunk: int, workers: int = 1) -> numpy.ndarray:
    """Evaluate ``kernel(lo, hi)`` on every block and concatenate the results
    in block order. The output does not depend on ``workers``; kernels must
    derive their randomness from the sample indices only.

    Params
    -------
    kernel : Callable[[int, int], numpy.ndarray]
        Picklable when ``workers > 1``; returns one row per index
    count : int
        Number of samples
    chunk : int
        Block size
    workers : int
        Process count, 1 runs in the calling process

    Returns
    --------
    numpy.ndarray
        Results for indices ``0 .. count-1`` along the first axis
    """
    bounds = chunk_bounds(count, chunk)
    logging.debug("mapping %d samples in %d chunks on %d workers", count, len(bounds), workers)

    if workers <= 1 or len(bounds) <= 1:
        parts = [kernel(lo, hi) for lo, hi in bounds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(kernel, lo, hi) for lo, hi in bounds]
            parts = [future.result() for future in futures]

    return numpy.concatenate(parts, axis=0)
