"""Named random substreams.

Every piece of randomness in the package flows from a single u64 seed
through ``substream(seed, stream_id, *key)``.  Stream ids are fixed module
constants so that, e.g., mask sampling for batch 17 always consumes the
same stream regardless of what other components drew before it.
"""

from __future__ import annotations

import numpy as np

STREAM_MODEL_INIT = 0
STREAM_RATIO = 1
STREAM_MASK = 2
STREAM_DATA = 3
STREAM_TRIAL = 4


def substream(seed: int, *key: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *key)``.

    Built on :class:`numpy.random.SeedSequence` spawn keys, so distinct
    keys give statistically independent streams and the same key always
    reproduces the same stream.
    """
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(key)))
