"""Deterministic random-stream management.

Every stochastic component in the library draws from a
``numpy.random.Generator`` backed by the Philox bit generator, a 64-bit
counter-based RNG with a published algorithm, so that identical seeds
reproduce identical streams across runs and platforms.

Child streams are derived from a single master seed by hashing
``(master_seed, label, index)``: the label is mapped to a 32-bit word via
SHA-256 and the triple is fed to ``numpy.random.SeedSequence``. Streams
for different labels or indices are therefore statistically independent
and independent of the order in which they are created.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["label_hash", "child_seed", "rng_from", "spawn_rng"]


def label_hash(label: str) -> int:
    """Stable 32-bit hash of a stream label (first SHA-256 word)."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big")


def child_seed(master_seed: int, label: str, index: int = 0) -> np.random.SeedSequence:
    """Seed sequence for the stream ``(master_seed, label, index)``."""
    return np.random.SeedSequence((int(master_seed), label_hash(label), int(index)))


def rng_from(seed) -> np.random.Generator:
    """Philox generator from an integer seed or a SeedSequence."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(seed))


def spawn_rng(master_seed: int, label: str, index: int = 0) -> np.random.Generator:
    """Philox generator for the child stream ``(master_seed, label, index)``."""
    return rng_from(child_seed(master_seed, label, index))
