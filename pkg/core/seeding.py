#!/usr/bin/env python3
"""
Deterministic randomness
All randomness flows from one root seed through named substreams, and batch
simulations split their trajectories into fixed-size blocks that each own a
stream, so results never depend on the number of worker threads.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, TypeVar

import numpy as np

logger = logging.getLogger(__name__)

BLOCK_SIZE = 256

T = TypeVar("T")


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def named_seed(seed: int, name: str) -> np.random.SeedSequence:
    """SeedSequence for substream `name` under root `seed`"""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, _name_key(name)])


def named_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(named_seed(seed, name))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a seed from an existing generator (used to fan out streams)"""
    return int(rng.integers(0, 2**63 - 1))


def block_slices(n: int, block_size: int = BLOCK_SIZE) -> List[slice]:
    return [slice(start, min(start + block_size, n)) for start in range(0, n, block_size)]


def block_rngs(seed: int, name: str, n: int, block_size: int = BLOCK_SIZE) -> List[np.random.Generator]:
    """One generator per block of `block_size` trajectories"""
    children = named_seed(seed, name).spawn(len(block_slices(n, block_size)))
    return [np.random.default_rng(child) for child in children]


def parallel_map(fn: Callable[[int], T], count: int, workers: Optional[int] = None) -> List[T]:
    """Evaluate fn(0..count-1) on a thread pool, results in index order"""
    if workers is None:
        from core.config import config
        workers = config.WORKERS
    if workers <= 1 or count <= 1:
        return [fn(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def spawn_sequence_rngs(seed: int, name: str, count: int) -> Sequence[np.random.Generator]:
    """Per-sequence generators (sampling and evaluation streams)"""
    return [np.random.default_rng(child) for child in named_seed(seed, name).spawn(count)]
