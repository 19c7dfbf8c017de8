"""Named RNG sub-streams derived from one run seed.

Every stochastic consumer (shuffle, dropout, scheduler, negative sampling,
init) pulls from its own named stream so toggling one consumer never
perturbs the draws seen by another.
"""

import zlib

import numpy as np


def substream(seed: int, *tags) -> np.random.Generator:
    """Deterministic generator for (seed, tags).

    String tags are hashed with crc32; integer tags pass through. The same
    (seed, tags) tuple always yields an identical stream.
    """
    entropy = [int(seed)]
    for tag in tags:
        if isinstance(tag, str):
            entropy.append(zlib.crc32(tag.encode("utf-8")))
        else:
            entropy.append(int(tag))
    return np.random.default_rng(np.random.SeedSequence(entropy))
