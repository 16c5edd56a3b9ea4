"""Deterministic counter-based random streams.

Every random draw in the project comes from a Philox generator keyed by a
(seed, *path) tuple, so any stream can be reproduced in isolation: training
step k uses stream(seed, "step", k), data generation uses stream(seed,
"clip", c), etc. No mutable global RNG state exists, which makes checkpoint
resume exact without serializing generator internals.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream"]


def stream(seed: int, *path) -> np.random.Generator:
    """A fresh generator for the given seed and stream path."""
    tag = repr((int(seed),) + tuple(path)).encode()
    key = int.from_bytes(hashlib.sha256(tag).digest()[:16], "little")
    return np.random.Generator(np.random.Philox(key=key))
