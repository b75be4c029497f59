"""Deterministic named RNG substreams derived from one master seed.

Every randomness consumer (data generation, weight init, crop sampling,
shuffling) takes its own named stream, so toggling one feature never
perturbs the draws of another.
"""

import hashlib

import numpy as np


def substream(master_seed, name):
    """Independent Generator for (master_seed, name), stable across runs."""
    digest = hashlib.sha256(f"{master_seed}:{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))
