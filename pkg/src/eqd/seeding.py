"""Named random streams fanned out from a single master seed."""
from __future__ import annotations

import hashlib

import numpy as np


def stream_seed(master_seed: int, purpose: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def rng_stream(master_seed: int, purpose: str) -> np.random.Generator:
    """Independent generator for ``purpose``; same (seed, purpose) -> same stream."""
    return np.random.default_rng(stream_seed(master_seed, purpose))


def child_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Per-item generators drawn from a parent, stable regardless of item order."""
    base = int(rng.integers(0, 2**63 - 1))
    return [np.random.default_rng(s) for s in np.random.SeedSequence(base).spawn(n)]
