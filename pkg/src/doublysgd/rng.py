"""Deterministic seed-splitting for parallel and per-step random streams.

Every stream is addressed by ``(master_seed, *path)`` where the path is a
tuple of small non-negative integers.  Streams with distinct paths are
statistically independent (SeedSequence hashes the whole tuple), and the
same address always reproduces the same stream, so runs are replayable
and sweep cells can execute in any order or in parallel.

Path conventions used across the package:

==================  =======================================
``(PARTITION, k)``   epoch-``k`` reshuffling permutation
``(BATCH, t)``       step-``t`` minibatch draw
``(NOISE, t)``       step-``t`` shared noise block
``(NOISE, t, j)``    step-``t`` noise block of batch slot ``j``
``(CELL, c)``        sweep cell ``c``
==================  =======================================
"""

import numpy as np

STREAM_PARTITION = 0
STREAM_BATCH = 1
STREAM_NOISE = 2
STREAM_CELL = 3

_MASK64 = (1 << 64) - 1


def substream(master_seed: int, *path: int) -> np.random.Generator:
    """Return the generator addressed by ``(master_seed, *path)``."""
    if any(p < 0 for p in path):
        raise ValueError(f"stream path must be non-negative, got {path}")
    return np.random.default_rng(np.random.SeedSequence([master_seed & _MASK64, *path]))
