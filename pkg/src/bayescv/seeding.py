"""Deterministic seed derivation shared by data generation and samplers."""

from __future__ import annotations

import numpy as np


def seed_sequence(seed, *keys):
    """``SeedSequence`` for an int or tuple ``seed`` and stream ``keys``.

    Tuples are prefixed with their length: NumPy drops trailing zero words
    from the entropy, so without it ``(s, 0)`` and ``s`` would collide.
    """
    if isinstance(seed, (list, tuple)):
        entropy = [len(seed) + 1] + [int(s) for s in seed]
    else:
        entropy = int(seed)
    return np.random.SeedSequence(entropy, spawn_key=tuple(int(k) for k in keys))


def make_rng(seed, *keys):
    """Independent generator for ``(seed, *keys)``.

    ``seed`` may be an int or a tuple of ints; ``keys`` select a stream
    (chain index, replicate index, purpose tag) so that every consumer gets
    its own reproducible stream.
    """
    if isinstance(seed, np.random.Generator):
        if keys:
            raise TypeError("stream keys need an int or tuple seed")
        return seed
    return np.random.default_rng(seed_sequence(seed, *keys))
