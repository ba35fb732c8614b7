"""Per-path random streams and block scheduling.

Each path owns counter-based Philox streams keyed by ``(seed, path, purpose)``,
so a path's draws never depend on which other paths share its batch or on
how many workers run the batch.
"""

from __future__ import annotations

import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Sequence

import numpy as np

MASK64 = (1 << 64) - 1

DIFFUSION = 0
JUMPS = 1

# Paths are always simulated in blocks of this many consecutive indices, so a
# block sees the same array shapes no matter how blocks are spread over workers.
BLOCK_SIZE = 2048


def path_generator(seed: int, path: int, purpose: int = DIFFUSION) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=[int(seed) & MASK64, ((int(path) << 4) | purpose) & MASK64])
    )


class NoiseBuffer:
    """Standard normal draws for ``n`` paths, ``width`` numbers per step.

    Draws are pulled from each path's own stream in chunks of ``chunk`` steps;
    ``take(rows, step)`` returns the slice for the requested step.
    """

    def __init__(self, seed: int, paths: Sequence[int], width: int, chunk: int = 128):
        self.gens = [path_generator(seed, p, DIFFUSION) for p in paths]
        self.width = width
        self.chunk = chunk
        self.buf = np.empty((len(self.gens), chunk, width))
        self.filled_at = np.full(len(self.gens), -1, dtype=np.int64)

    def take(self, rows: np.ndarray, step: int) -> np.ndarray:
        block = step // self.chunk
        full = rows.size == len(self.gens)
        if step % self.chunk and full:
            return self.buf[:, step % self.chunk]
        stale = rows[self.filled_at[rows] != block]
        for i in stale:
            # paths that skipped whole chunks still consume them in order
            while self.filled_at[i] < block:
                self.buf[i] = self.gens[i].standard_normal((self.chunk, self.width))
                self.filled_at[i] += 1
        if full:
            return self.buf[:, step % self.chunk]
        return self.buf[rows, step % self.chunk]


def split_blocks(n_paths: int, block: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    return [(s, min(s + block, n_paths)) for s in range(0, n_paths, block)]


_TASK: Callable | None = None


def _run_task(bounds):
    return _TASK(*bounds)


def run_blocks(task: Callable[[int, int], object], n_paths: int, workers: int = 1,
               block: int = BLOCK_SIZE) -> list:
    """Run ``task(start, stop)`` over fixed path blocks, gathered in block order."""
    global _TASK
    blocks = split_blocks(n_paths, block)
    if workers <= 1 or len(blocks) == 1:
        return [task(a, b) for a, b in blocks]
    _TASK = task
    try:
        ctx = mp.get_context("fork")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            return list(pool.map(_run_task, blocks))
    finally:
        _TASK = None
