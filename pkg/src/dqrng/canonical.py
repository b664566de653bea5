"""Canonical JSON bytes and hashing used by transcripts and wire frames."""
from __future__ import annotations

import hashlib
import json
import math
from typing import Any

import numpy as np

# integers at or above this magnitude are written as decimal strings
SAFE_INT = 2**53


def _prepare(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _prepare(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        if obj.dtype.kind in "iu":
            if obj.size and (int(obj.max()) >= SAFE_INT or int(obj.min()) <= -SAFE_INT):
                return [_prepare(int(v)) for v in obj.tolist()]
            return obj.tolist()
        return [_prepare(v) for v in obj.tolist()]
    if isinstance(obj, (list, tuple)):
        return [_prepare(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        v = int(obj)
        return str(v) if abs(v) >= SAFE_INT else v
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            raise ValueError("NaN has no canonical JSON form")
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def canonical_bytes(obj: Any) -> bytes:
    """Compact JSON, keys in insertion order, no NaN, big ints as strings.

    Callers control field order by building dicts in the required order.
    """
    return json.dumps(_prepare(obj), separators=(",", ":"), ensure_ascii=True,
                      allow_nan=False).encode("ascii")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def parse_int(v: Any) -> int:
    """Inverse of the big-integer rule: accept int or decimal string."""
    if isinstance(v, bool):
        raise ValueError("boolean is not an integer")
    if isinstance(v, int):
        return v
    if isinstance(v, str) and v.lstrip("-").isdigit():
        return int(v)
    raise ValueError(f"not an integer: {v!r}")


def parse_float(v: Any) -> float:
    if v == "inf":
        return math.inf
    if v == "-inf":
        return -math.inf
    return float(v)


def int_array(seq: Any) -> np.ndarray:
    """int64 array from a list of ints and/or decimal strings."""
    arr = np.asarray(seq)
    if arr.size == 0:
        return np.empty(0, dtype=np.int64)
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64, copy=False)
    return np.array([parse_int(v) for v in seq], dtype=np.int64)
