"""Deterministic seed derivation shared across the package."""

from __future__ import annotations

import hashlib

import numpy as np

_MASK63 = (1 << 63) - 1


def derive_seed(*parts) -> int:
    """Collapse labels/ints into a stable 63-bit seed.

    Hashes the string forms with sha256, so results do not depend on
    Python's per-process hash randomization or platform word size.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63


def rng_from(*parts) -> np.random.Generator:
    """A fresh numpy Generator seeded from the given labels."""
    return np.random.default_rng(derive_seed(*parts))
