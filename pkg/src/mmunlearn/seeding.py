"""Named random streams derived from a single experiment seed.

Every stochastic stage (splitting, init, negative sampling, probes, ...)
pulls its own generator so that changing one stage never perturbs the
randomness of another.
"""

import hashlib

import numpy as np


def stream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent generator for stream `name` under the experiment seed."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    tag = int.from_bytes(hashlib.blake2s(name.encode("utf-8"), digest_size=4).digest(), "little")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))
