"""Deterministic random streams.

Every stochastic entry point takes a master seed and derives a
counter-based Philox stream keyed (seed, stream_id).  Identical
(seed, config) pairs therefore reproduce identical draws regardless of
platform, and distinct stream ids are statistically independent.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
