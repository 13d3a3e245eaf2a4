"""Deterministic random stream derivation."""
from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 63) - 1


def _to_entropy(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & _MASK
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(*parts) -> np.random.Generator:
    """Generator keyed by an ordered tuple of ints/strings.

    Equal key tuples give bit-identical streams; distinct tuples give
    independent ones, so every consumer (data generation, partitioning,
    per-client init, per-round batching) can derive its own stream from a
    single experiment seed.
    """
    return np.random.default_rng(np.random.SeedSequence([_to_entropy(p) for p in parts]))
