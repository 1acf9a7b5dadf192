"""Seed management: one master seed, named deterministic sub-streams.

Every source of randomness in a run (weight init, batch shuffling, dropout
masks, audio synthesis) draws from its own named stream so that adding a
consumer never perturbs the draws of another.
"""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a Generator keyed by (seed, name), stable across runs."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, tag)))
