"""Deterministic seed derivation.

Every source of randomness in the pipeline gets its own named stream derived
from a single master seed, so results are independent of execution order and
parallel schedule. Derivation is SHA-256 over the master seed and a path of
string labels, truncated to 64 bits.
"""

from __future__ import annotations

import hashlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(master_seed: int, *path: object) -> int:
    """Derive a child seed from a master seed and a label path.

    Labels may be strings or integers; they are joined with '/' so
    ``derive_seed(s, "fold", 3)`` and ``derive_seed(s, "fold/3")`` coincide by
    construction and callers should keep labels slash-free.
    """
    key = str(master_seed & MASK64) + "|" + "/".join(str(p) for p in path)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master_seed: int, *path: object) -> np.random.Generator:
    """A numpy Generator on the named stream."""
    return np.random.default_rng(derive_seed(master_seed, *path))
