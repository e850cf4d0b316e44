"""Deterministic random streams.

Every stochastic component draws from a counter-based Philox generator keyed
by the master seed plus a tuple of string labels, so any part of a run can be
replayed in isolation (e.g. training step k, or sampling chain r) without
consuming state from a shared stream.
"""

import zlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label) & 0xFFFFFFFF
    return zlib.crc32(str(label).encode("utf-8"))


def stream(master_seed: int, *labels) -> np.random.Generator:
    """Return an independent generator keyed by (master_seed, *labels)."""
    entropy = (int(master_seed),) + tuple(_label_key(l) for l in labels)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
