"""Deterministic RNG trees.

Every stochastic component draws from a generator addressed by (root seed,
path), so runs are reproducible and independent of execution interleaving.
"""

from __future__ import annotations

import zlib

import numpy as np


def child_rng(seed, *path):
    """Generator for a (seed, path) address; strings hash via crc32."""
    key = tuple(
        zlib.crc32(p.encode("utf-8")) if isinstance(p, str) else int(p)
        for p in path
    )
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))
