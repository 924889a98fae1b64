"""Counter-based hashing for reproducible, batch-order-independent jitter.

Stratified sample jitter is derived from (seed, step, ray id, sample id)
through a splitmix64 finalizer, so the value for a given ray never depends
on which batch it was drawn in or on worker count.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def hash_u64(*keys) -> np.ndarray:
    """Combine integer keys (scalars or broadcastable arrays) into uint64 hashes."""
    h = np.uint64(0x8000000000000001)
    with np.errstate(over="ignore"):  # uint64 wraparound is the point
        for k in keys:
            k = np.asarray(k).astype(np.uint64, copy=False)
            h = _mix((h + _GOLDEN) ^ k)
    return h


def uniform01(*keys) -> np.ndarray:
    """Deterministic floats in [0, 1) keyed by the given integers."""
    bits = hash_u64(*keys)
    return (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def derive_seed(*keys) -> int:
    """A stable derived seed for numpy Generators."""
    return int(hash_u64(*keys))
