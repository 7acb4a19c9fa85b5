"""Seeded, counter-based random streams.

Every random decision in the package draws from numpy's Philox bit generator
keyed by a :class:`numpy.random.SeedSequence` built from the run seed plus a
stream label, so independent call sites never share state and results do not
depend on call order.
"""
from __future__ import annotations

import hashlib

import numpy as np

GENERATOR_ID = "numpy.random.Philox+SeedSequence"


def label_key(label: str) -> int:
    """Stable 64-bit integer for a string label."""
    return int.from_bytes(hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest(), "little")


def make_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Generator for ``seed`` and an optional stream path (ints or strings)."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    entropy = [int(seed)]
    for part in stream:
        entropy.append(label_key(part) if isinstance(part, str) else int(part))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
