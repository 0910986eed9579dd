"""Deterministic named random streams.

All randomness in a run fans out from one root seed. Each consumer asks for
a stream by name ("init", "kmeans", "dropout", ...) so stages stay
independently reproducible: changing how many numbers one stage draws never
perturbs another stage.
"""

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def named_stream(seed: int, name: str) -> np.random.Generator:
    """Return an independent Generator keyed by (seed, name)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _name_key(name)]))
