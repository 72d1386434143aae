"""Explicit, splittable random state.

All stochastic code takes a :class:`numpy.random.Generator` built here.  The
bit generator is Philox (counter based), so identical seeds replay
bit-identical streams and child streams from :func:`split` never overlap.
"""

from __future__ import annotations

import os

import numpy as np

SEED_ENV = "AMPOST_SEED"


def make_rng(seed: int | None = None) -> np.random.Generator:
    """Generator seeded from ``seed``; ``AMPOST_SEED`` overrides when set."""
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        seed = int(env)
    if seed is None:
        seed = 0
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))


def split(rng: np.random.Generator, n: int = 2) -> list[np.random.Generator]:
    return list(rng.spawn(n))
