"""Named child streams derived from one root seed.

Every run owns a single integer seed; independent random consumers (dataset
generation, parameter init, perturbation draws) each get a stream keyed by a
stable name hash, so adding a consumer never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["child_sequence", "child_seed", "child_rng"]


def child_sequence(root: int, name: str) -> np.random.SeedSequence:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    tag = int.from_bytes(digest[:8], "big")
    return np.random.SeedSequence((int(root), tag))


def child_seed(root: int, name: str) -> int:
    """A plain integer seed for consumers that take one (e.g. SceneSpec)."""
    return int(child_sequence(root, name).generate_state(1, dtype=np.uint64)[0])


def child_rng(root: int, name: str) -> np.random.Generator:
    return np.random.default_rng(child_sequence(root, name))
