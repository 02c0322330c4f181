"""Reproducible random streams.

Every stream is a numpy ``Generator`` over the counter-based Philox bit
generator, keyed by a ``SeedSequence`` built from a root seed and an integer
path (job index, replica index, ...).  A stream depends only on its key
path, never on the order in which streams are created or on how work is
scheduled across threads.
"""
from __future__ import annotations

import os

import numpy as np

__all__ = ["make_rng", "spawn", "resolve_seed", "SEED_ENV"]

SEED_ENV = "GFLAB_SEED"


def make_rng(seed: int | None, *path: int) -> np.random.Generator:
    """Generator for the stream ``(seed, *path)``."""
    ss = np.random.SeedSequence(entropy=resolve_seed(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def spawn(seed: int | None, n: int, *path: int) -> list[np.random.Generator]:
    return [make_rng(seed, *path, i) for i in range(n)]


def resolve_seed(seed: int | None) -> int:
    """Explicit seed, else the environment override, else 0."""
    if seed is not None:
        return int(seed)
    env = os.environ.get(SEED_ENV)
    return int(env) if env else 0
