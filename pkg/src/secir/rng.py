"""Deterministic RNG derivation.

All randomness in a session flows from named seeds in the config.  Streams
are derived from (seed, label) pairs so that independent call sites never
share a stream and the plaintext oracle can replay any of them.
"""

from __future__ import annotations

import zlib

import numpy as np


def derive_rng(seed: int, label: str = "") -> np.random.Generator:
    """PCG64 generator keyed by ``seed`` and a stable string label."""
    key = zlib.crc32(label.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


def as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return derive_rng(int(seed_or_rng))
