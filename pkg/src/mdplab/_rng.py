"""Counter-based random streams and deterministic block fan-out.

Every Monte Carlo loop in the package draws its randomness through
:func:`stream`, keyed by ``(master_seed, tag, index)``. Paths are grouped in
fixed-size blocks, each block owning one stream, so the numbers a path sees
never depend on how many workers process the blocks.
"""

from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

BLOCK_SIZE = 2048
WORKERS_ENV = "MDPLAB_WORKERS"


def _tag_id(tag: str) -> int:
    return zlib.crc32(tag.encode())


def stream(seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Philox generator for stream ``index`` of purpose ``tag`` under ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _tag_id(tag), int(index)])
    return np.random.Generator(np.random.Philox(ss))


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def blocks(n_paths: int, block_size: int = BLOCK_SIZE) -> list[tuple[int, int]]:
    """(block index, size) pairs covering ``n_paths`` paths in order."""
    out = []
    start = 0
    idx = 0
    while start < n_paths:
        size = min(block_size, n_paths - start)
        out.append((idx, size))
        start += size
        idx += 1
    return out


def fan_out(
    n_paths: int,
    seed: int,
    tag: str,
    fn: Callable[[np.random.Generator, int], Sequence[np.ndarray] | np.ndarray],
    block_size: int = BLOCK_SIZE,
):
    """Run ``fn(rng, size)`` over path blocks and concatenate results in block order.

    ``fn`` may return one array or a tuple of arrays (each with the path axis
    first). The concatenation order is fixed, so any reduction applied by the
    caller is independent of the worker count.
    """
    parts = blocks(n_paths, block_size)

    def job(part):
        idx, size = part
        return fn(stream(seed, tag, idx), size)

    workers = worker_count()
    if workers > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, parts))
    else:
        results = [job(p) for p in parts]

    if isinstance(results[0], tuple):
        return tuple(np.concatenate([r[k] for r in results]) for k in range(len(results[0])))
    return np.concatenate(results)
