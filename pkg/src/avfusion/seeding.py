"""Deterministic derivation of independent RNG streams from (seed, index).

Streams must not depend on iteration or batch order, so each consumer mixes
its stable index into the base seed with a splitmix64 finalizer and seeds a
fresh PCG64 generator from the result.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def mix_seed(seed: int, index: int) -> int:
    """64-bit hash mix of a base seed and a stream index."""
    z = (seed + (index + 1) * _GOLDEN) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(mix_seed(seed, index))
