"""Seed derivation and canonical hashing shared across modules."""

from __future__ import annotations

import hashlib
import json

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labelled parts."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def make_rng(*parts) -> np.random.Generator:
    return np.random.default_rng(derive_seed(*parts))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def hash_config(obj, exclude: tuple = ()) -> str:
    """Hash a config dict canonically, dropping volatile keys."""
    trimmed = {k: v for k, v in obj.items() if k not in exclude}
    return sha256_hex(canonical_json(trimmed).encode())
