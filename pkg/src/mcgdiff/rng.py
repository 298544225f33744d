"""Counter-based seed splitting.

Every random stream is a Philox generator keyed by ``(seed, *path)``, so sweep
cells and sampler sub-streams are independent yet reproducible without any
shared mutable state.
"""
from __future__ import annotations

import numpy as np

SAMPLER = 0
MEASUREMENT = 1
DATA = 2
TRAINING = 3


def stream(seed: int, *path: int) -> np.random.Generator:
    if seed is None:
        raise ValueError("a seed is required")
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(seq))
