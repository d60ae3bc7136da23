"""Shared helpers: deterministic RNG derivation and ordered parallel maps."""

import hashlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"rng key must be int or str, got {type(key).__name__}")


def spawn_rng(seed: int, *keys) -> np.random.Generator:
    """Derive an independent generator from (seed, *keys).

    Hash-based, so parallel consumers created from the same seed are
    order-independent. Strings are hashed with sha256 to stay stable across
    interpreter runs (no reliance on PYTHONHASHSEED).
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def map_ordered(fn, items, threads: int = 1) -> list:
    """Apply fn to items, optionally with a thread pool.

    Results come back in input order regardless of completion order, so
    callers get schedule-independent output.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
