"""Seeded random streams.

Every random quantity in the package is drawn from a stream keyed by a root
seed plus a tuple of integers (block index, replication index, ...).  Streams
use the counter-based Philox generator, so a given key always produces the
same numbers no matter which thread or in which order it is consumed.
"""

from __future__ import annotations

import numpy as np


def substream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) % (1 << 64), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit integer seed derived from ``(seed, *key)``."""
    ss = np.random.SeedSequence(entropy=int(seed) % (1 << 64), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
