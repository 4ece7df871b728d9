"""Deterministic seed derivation.

Every random stream is keyed by ``(master_seed, label, index)``; the label is
hashed with CRC32 so the mapping does not depend on ``PYTHONHASHSEED``.
"""
import zlib

import numpy as np


def _label_key(label):
    return zlib.crc32(str(label).encode("utf-8"))


def derive_seed(seed, label, index=0):
    """Return a 63-bit integer seed derived from ``(seed, label, index)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _label_key(label), int(index)])
    hi, lo = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) >> 1


def derive_rng(seed, label, index=0):
    """Return a fresh ``numpy.random.Generator`` for the keyed stream."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _label_key(label), int(index)])
    )
