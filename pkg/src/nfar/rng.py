"""Seedable counter-based random streams.

Every stochastic component in this project draws from a NumPy Philox
generator (a counter-based PRNG), keyed by ``(seed, stream)``. Distinct
stream ids give independent streams from the same user-facing seed, so
e.g. dataset noise and training noise never alias.
"""

from __future__ import annotations

import numpy as np

# Fixed stream ids, one per consumer.
STREAM_DATA = 0
STREAM_TRAIN = 1
STREAM_GENERATE = 2
STREAM_INIT = 3
STREAM_MONTE_CARLO = 4


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by (seed, stream)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))
