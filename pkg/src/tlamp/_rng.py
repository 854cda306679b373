"""Deterministic random-stream factory.

Every stochastic ingredient of an experiment (signal draw, design replicate,
Monte-Carlo Gaussian, AMP initialization, ...) gets its own counter-based
Philox stream keyed by (master seed, purpose tag, indices).  Streams are
independent of each other and of scheduling order, which is what makes
replicate-level parallelism and common-random-number reuse reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(master_seed: int, tag: str, *indices: int) -> np.random.Generator:
    """Return the Philox generator for (master_seed, tag, *indices).

    The tag is hashed into the spawn key so that distinct purposes can never
    collide even when their integer indices do.
    """
    digest = int.from_bytes(
        hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest(), "little"
    )
    ss = np.random.SeedSequence(
        entropy=int(master_seed), spawn_key=(digest, *(int(i) for i in indices))
    )
    return np.random.Generator(np.random.Philox(ss))
