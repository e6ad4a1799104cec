"""Deterministic random-stream derivation.

Every consumer of randomness gets its own Generator derived from the root
seed plus a structural path (e.g. seed, image index, object index).  Streams
are independent and reproducible regardless of evaluation order.
"""

from __future__ import annotations

import numpy as np


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Generator for the stream identified by (seed, *path)."""
    ss = np.random.SeedSequence((int(seed),) + tuple(int(p) for p in path))
    return np.random.Generator(np.random.PCG64(ss))
