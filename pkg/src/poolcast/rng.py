"""Labelled, counter-based random streams.

Every random draw in the package comes from a generator built here, so a run
is a pure function of its master seed.  Streams are Philox generators keyed by
``SeedSequence(master_seed, spawn_key=labels)``; different label tuples give
statistically independent, non-overlapping streams.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_key(label) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be nonnegative")
        return int(label)
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(master_seed: int, *labels) -> np.random.Generator:
    """Generator for the sub-stream ``labels`` of ``master_seed``."""
    if master_seed is None:
        raise ValueError("an explicit seed is required")
    key = tuple(_label_key(lab) for lab in labels)
    seq = np.random.SeedSequence(int(master_seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(master_seed: int, *labels) -> int:
    """Integer seed for APIs that want one (e.g. Latin hypercube samplers)."""
    key = tuple(_label_key(lab) for lab in labels)
    seq = np.random.SeedSequence(int(master_seed), spawn_key=key)
    return int(seq.generate_state(1, dtype=np.uint32)[0])
