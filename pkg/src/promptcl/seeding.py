"""Deterministic random streams derived from one experiment seed.

Every consumer of randomness draws from a PCG64 generator seeded with
``SeedSequence([seed, STREAM_ID])``, so a single top-level seed fully
determines initialization, data order, and synthetic noise, and distinct
concerns never share a stream. PCG64 output is stable across platforms and
numpy versions, which makes synthetic datasets bit-reproducible.
"""

from __future__ import annotations

import numpy as np

# Fixed registry; never renumber entries, only append.
STREAM_IDS = {
    "templates": 0,   # synthetic class template images
    "samples": 1,     # synthetic per-sample noise and shifts
    "init": 2,        # backbone weight init
    "head": 3,        # classifier head init
    "pool": 4,        # prompt pool key/component init
    "order": 5,       # minibatch shuffling
    "class_perm": 6,  # continual class-order permutation
}


def substream(seed: int, name: str) -> np.random.Generator:
    """Named child generator of ``seed``; independent across names."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, STREAM_IDS[name]])))


def split_stream(seed: int, name: str, index: int) -> np.random.Generator:
    """Like ``substream`` but keyed by an extra index (e.g. train/test split)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, STREAM_IDS[name], index])))
