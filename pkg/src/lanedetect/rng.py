"""Deterministic RNG stream derivation.

Each consumer of randomness (weight init, dataset split, per-epoch
shuffle, dropout, augmentation) gets its own PCG64 stream keyed on the
run seed plus a purpose tag, and where relevant the epoch index.  Two
runs with the same seed therefore draw identical values regardless of
how many batches or layers executed in between, which is what makes
checkpoint resume bit-exact.
"""

import numpy as np

# purpose tags; part of the on-disk reproducibility contract, do not renumber
STREAM_INIT = 0
STREAM_SPLIT = 1
STREAM_SHUFFLE = 2
STREAM_DROPOUT = 3
STREAM_AUGMENT = 4


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Return a Generator for (seed, *key), independent of all other keys."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, key)])))
