"""Stable seed derivation.

Python's ``hash`` is salted per process, so every derived stream goes through
sha256 instead. Streams are keyed by a tuple of parts, e.g.
``(master_seed, "episode", 17)``.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(*parts: object) -> int:
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(*parts: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def stable_hash(obj: object) -> str:
    """sha256 of the canonical JSON form of ``obj`` (first 16 hex chars)."""
    import json

    raw = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()[:16]
