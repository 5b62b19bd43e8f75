"""Deterministic RNG stream derivation.

Every stochastic draw in the package (embedding init, splits, negative
sampling, walk sampling, relaxation noise, evaluation draws) comes from a
numpy Generator derived here, so that a (seed, config, data) triple fully
determines a run regardless of torch version or thread count.
"""

import hashlib

import numpy as np

# Stream tags keep purposes from colliding on the same seed.
STREAM_INIT_R = 1
STREAM_INIT_S = 2
STREAM_SPLIT = 3
STREAM_WALKS = 4
STREAM_TRAIN_NEG = 5
STREAM_VALID_NEG = 6
STREAM_RELAX = 7
STREAM_EVAL = 8
STREAM_SHUFFLE = 9
STREAM_SOCIAL_NEG = 10
STREAM_ANALYSIS = 11


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 stream for (seed, *keys).

    Streams with distinct key tuples are statistically independent; the
    same tuple always yields the same stream.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, keys)])))


def stable_digest(text: str) -> str:
    """Hex sha256 of a canonical text blob (config digests, checkpoints)."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
