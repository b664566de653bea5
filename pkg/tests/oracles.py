"""Slow, obviously-correct reference implementations used as test oracles.

Plain Python over dicts and lists; nothing here shares code with the package.
"""
from __future__ import annotations

import math
from itertools import accumulate


def records(index, bins) -> dict[int, int]:
    return {int(i): int(b) for i, b in zip(index, bins)}


def intersect(a: dict[int, int], b: dict[int, int]):
    """(sorted matching (index, bin) pairs, discord count)."""
    same = sorted((i, v) for i, v in a.items() if b.get(i) == v)
    discord = sum(1 for i, v in a.items() if i in b and b[i] != v)
    return same, discord


def merge(matches):
    seen: dict[int, set[int]] = {}
    for pairs in matches:
        for i, v in pairs:
            seen.setdefault(i, set()).add(v)
    kept = sorted((i, next(iter(v))) for i, v in seen.items() if len(v) == 1)
    conflicts = sum(1 for v in seen.values() if len(v) > 1)
    return kept, conflicts


def consensus(quantum: list[dict[int, int]], classical: list[list[int]]):
    """(I, R^q, I_final, R^qc, conflicts) as Python lists."""
    matches = []
    for i in range(len(quantum)):
        for j in range(i + 1, len(quantum)):
            matches.append(intersect(quantum[i], quantum[j])[0])
    kept, conflicts = merge(matches)
    rc = set()
    for values in classical:
        rc.update(values)
    final = [(i, v) for i, v in kept if i in rc]
    return ([i for i, _ in kept], [v for _, v in kept],
            [i for i, _ in final], [v for _, v in final], conflicts)


def fold(values, domain: int) -> int:
    if domain <= 1:
        return 0
    bits = 0
    while (1 << bits) < domain:
        bits += 1
    x = 0
    for v in values:
        x ^= v
    while x >= (1 << bits):
        x = (x % (1 << bits)) ^ (x >> bits)
    return x % domain


def weighted_pick(u: int, domain: int, weights) -> int:
    cum = list(accumulate(weights))
    cuts = [math.floor(c * domain + 0.5) for c in cum]
    cuts[-1] = domain
    for k, c in enumerate(cuts):
        if u < c:
            return k
    raise AssertionError("u outside domain")


def aggregate(r_qc, l, b_lo, b_hi, agg="sum_mod", weights=None, resolution=256):
    n = len(r_qc)
    if n < l:
        raise ValueError("too few values")
    domain = resolution if weights else b_hi - b_lo + 1
    out, pos = [], 0
    for k in range(l):
        size = n // l + (1 if k < n % l else 0)
        chunk = r_qc[pos:pos + size]
        pos += size
        a = sum(chunk) % domain if agg == "sum_mod" else fold(chunk, domain)
        if weights:
            a = weighted_pick(a, domain, weights)
        out.append(b_lo + a)
    return out


def histogram(a: dict[int, int], b: dict[int, int], max_offset: int) -> dict[int, int]:
    return {d: sum(1 for i, v in a.items() if b.get(i + d) == v)
            for d in range(-max_offset, max_offset + 1)}
