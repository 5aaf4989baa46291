"""Parameter persistence: one npz holding every named tensor plus the
hash of the run configuration that produced it. Round-trips preserve bits.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

HASH_KEY = "__config_hash__"


def stable_hash(obj) -> str:
    """sha256 of a canonical JSON encoding."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def save_checkpoint(path, params: dict, config_hash: str = "") -> None:
    arrays = dict(params)
    if HASH_KEY in arrays:
        raise ValueError(f"parameter name collides with {HASH_KEY}")
    arrays[HASH_KEY] = np.array(config_hash)
    np.savez(path, **arrays)


def load_checkpoint(path, expect_hash: str = None):
    """Returns (params, config_hash); verifies the hash when given one."""
    with np.load(path) as data:
        stored = str(data[HASH_KEY]) if HASH_KEY in data else ""
        params = {k: data[k] for k in data.files if k != HASH_KEY}
    if expect_hash is not None and stored != expect_hash:
        raise ValueError(
            f"checkpoint was produced by a different config: "
            f"stored hash {stored[:12]}..., expected {expect_hash[:12]}...")
    return params, stored
