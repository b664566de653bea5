"""Seed derivation.

Every random stream in an experiment comes from one root seed.  A child seed
is the first 8 bytes (big-endian) of SHA-256 over the ASCII string
``"<root>/<label>/<label>..."``, so the derivation is reproducible from any
language without depending on numpy's internal spawning scheme.
"""
from __future__ import annotations

import hashlib

import numpy as np


def split_seed(root: int, *path: object) -> int:
    text = "/".join([str(int(root))] + [str(p) for p in path])
    digest = hashlib.sha256(text.encode("ascii")).digest()
    return int.from_bytes(digest[:8], "big")


def make_rng(root: int, *path: object) -> np.random.Generator:
    return np.random.default_rng(split_seed(root, *path) if path else int(root))
