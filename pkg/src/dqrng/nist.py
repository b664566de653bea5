"""A subset of the NIST SP 800-22 statistical tests.

Implemented: frequency (monobit), block frequency, runs, longest run of ones,
cumulative sums (forward and backward), approximate entropy and serial.  The
other eight tests of the suite are not provided.  Each test returns a
p-value, or ``None`` when the sequence is too short for it.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy.special import erfc, gammaincc, ndtr

ALPHA = 0.01
MIN_BITS = 100

# longest-run-of-ones category tables: (block length, lowest class, probabilities)
_LONGEST_RUN_TABLES = (
    (750_000, 10_000, 10, (0.0882, 0.2092, 0.2483, 0.1933, 0.1208, 0.0675, 0.0727)),
    (6_272, 128, 4, (0.1174, 0.2430, 0.2493, 0.1752, 0.1027, 0.1124)),
    (128, 8, 1, (0.2148, 0.3672, 0.2305, 0.1875)),
)


def as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits, dtype=np.int8)
    if arr.ndim != 1 or np.any((arr != 0) & (arr != 1)):
        raise ValueError("bit sequence must be a 1-D array of 0/1")
    return arr


def values_to_bits(values, width: int = 8) -> np.ndarray:
    """Big-endian ``width``-bit expansion of each non-negative integer."""
    v = np.asarray(values, dtype=np.int64)
    if v.size and (v.min() < 0 or v.max() >= 1 << width):
        raise ValueError(f"values do not fit in {width} bits")
    shifts = np.arange(width - 1, -1, -1)
    return ((v[:, None] >> shifts) & 1).astype(np.int8).ravel()


def read_bits_file(path: str | Path) -> np.ndarray:
    """ASCII '0'/'1' text, whitespace-separated decimal bytes, or raw binary."""
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        text = None
    if text is not None and text.strip() and set(text) <= set("01 \t\r\n"):
        return np.frombuffer("".join(text.split()).encode(), dtype=np.uint8).astype(np.int8) - 48
    if text is not None and text.strip() and set(text) <= set("0123456789 ,\t\r\n"):
        return values_to_bits([int(t) for t in text.replace(",", " ").split()])
    return np.unpackbits(np.frombuffer(raw, dtype=np.uint8)).astype(np.int8)


def _igamc(a: float, x: float) -> float:
    return float(gammaincc(a, x))


def monobit(bits, *, enforce_length: bool = True) -> float | None:
    e = as_bits(bits)
    n = e.size
    if n < 1 or (enforce_length and n < MIN_BITS):
        return None
    s = abs(2 * int(e.sum()) - n) / math.sqrt(n)
    return float(erfc(s / math.sqrt(2)))


def block_frequency(bits, block: int = 128, *, enforce_length: bool = True) -> float | None:
    e = as_bits(bits)
    n_blocks = e.size // block
    if n_blocks < 1 or (enforce_length and e.size < MIN_BITS):
        return None
    pi = e[: n_blocks * block].reshape(n_blocks, block).mean(axis=1)
    chi2 = 4.0 * block * float(((pi - 0.5) ** 2).sum())
    return _igamc(n_blocks / 2.0, chi2 / 2.0)


def runs(bits, *, enforce_length: bool = True) -> float | None:
    e = as_bits(bits)
    n = e.size
    if n < 2 or (enforce_length and n < MIN_BITS):
        return None
    pi = float(e.mean())
    if abs(pi - 0.5) >= 2.0 / math.sqrt(n):
        # frequency prerequisite failed; the test is not applicable
        return 0.0
    v_obs = 1 + int(np.count_nonzero(e[1:] != e[:-1]))
    num = abs(v_obs - 2.0 * n * pi * (1 - pi))
    return float(erfc(num / (2.0 * math.sqrt(2.0 * n) * pi * (1 - pi))))


def _longest_runs(blocks: np.ndarray) -> np.ndarray:
    n_blocks, m = blocks.shape
    padded = np.zeros((n_blocks, m + 2), dtype=np.int8)
    padded[:, 1:-1] = blocks
    d = np.diff(padded.ravel())
    starts = np.flatnonzero(d == 1)
    ends = np.flatnonzero(d == -1)
    longest = np.zeros(n_blocks, dtype=np.int64)
    np.maximum.at(longest, starts // (m + 2), ends - starts)
    return longest


def longest_run(bits) -> float | None:
    e = as_bits(bits)
    n = e.size
    for min_n, block, low, probs in _LONGEST_RUN_TABLES:
        if n >= min_n:
            break
    else:
        return None
    n_blocks = n // block
    longest = _longest_runs(e[: n_blocks * block].reshape(n_blocks, block))
    k = len(probs) - 1
    classes = np.clip(longest - low, 0, k)
    v = np.bincount(classes, minlength=k + 1)
    expected = n_blocks * np.asarray(probs)
    chi2 = float(((v - expected) ** 2 / expected).sum())
    return _igamc(k / 2.0, chi2 / 2.0)


def _tdiv(a: int, b: int) -> int:
    """C-style integer division truncating toward zero."""
    q = abs(a) // abs(b)
    return q if (a >= 0) == (b >= 0) else -q


def _cusum_p(e: np.ndarray) -> float:
    n = e.size
    z = int(np.abs(np.cumsum(2 * e.astype(np.int64) - 1)).max())
    if z == 0:
        return 1.0
    sqn = math.sqrt(n)
    k1 = np.arange(_tdiv(_tdiv(-n, z) + 1, 4), _tdiv(_tdiv(n, z) - 1, 4) + 1)
    k2 = np.arange(_tdiv(_tdiv(-n, z) - 3, 4), _tdiv(_tdiv(n, z) - 1, 4) + 1)
    s1 = (ndtr((4 * k1 + 1) * z / sqn) - ndtr((4 * k1 - 1) * z / sqn)).sum()
    s2 = (ndtr((4 * k2 + 3) * z / sqn) - ndtr((4 * k2 + 1) * z / sqn)).sum()
    return float(min(1.0, max(0.0, 1.0 - s1 + s2)))


def cumulative_sums(bits, *, enforce_length: bool = True) -> tuple[float, float] | None:
    """(forward, backward) p-values."""
    e = as_bits(bits)
    if e.size < 1 or (enforce_length and e.size < MIN_BITS):
        return None
    return _cusum_p(e), _cusum_p(e[::-1])


def _pattern_counts(e: np.ndarray, m: int) -> np.ndarray:
    """Counts of each overlapping m-bit pattern, wrapping around the end."""
    if m == 0:
        return np.array([e.size])
    ext = np.concatenate([e, e[: m - 1]]).astype(np.int64)
    codes = np.zeros(e.size, dtype=np.int64)
    for j in range(m):
        codes = (codes << 1) | ext[j: j + e.size]
    return np.bincount(codes, minlength=1 << m)


def approximate_entropy(bits, m: int = 10, *, enforce_length: bool = True) -> float | None:
    e = as_bits(bits)
    n = e.size
    if n < 1 or (enforce_length and n < 1 << (m + 5)):
        return None

    def phi(k: int) -> float:
        c = _pattern_counts(e, k) / n
        c = c[c > 0]
        return float((c * np.log(c)).sum())

    apen = phi(m) - phi(m + 1)
    chi2 = 2.0 * n * (math.log(2) - apen)
    return _igamc(2.0 ** (m - 1), chi2 / 2.0)


def serial(bits, m: int = 16, *, enforce_length: bool = True) -> tuple[float, float] | None:
    e = as_bits(bits)
    n = e.size
    if m < 2 or n < 1 or (enforce_length and n < 1 << (m + 2)):
        return None

    def psi2(k: int) -> float:
        if k <= 0:
            return 0.0
        v = _pattern_counts(e, k).astype(float)
        return float((1 << k) / n * (v**2).sum() - n)

    p0, p1, p2 = psi2(m), psi2(m - 1), psi2(m - 2)
    d1 = p0 - p1
    d2 = p0 - 2 * p1 + p2
    return _igamc(2.0 ** (m - 2), d1 / 2.0), _igamc(2.0 ** (m - 3), d2 / 2.0)


TEST_NAMES = (
    "monobit", "block_frequency", "runs", "longest_run", "cusum_forward",
    "cusum_backward", "approximate_entropy", "serial_1", "serial_2",
)


def nist_subset(bits, *, block: int = 128, apen_m: int = 10,
                serial_m: int = 16) -> dict[str, float | None]:
    """Run every implemented test; skipped tests map to ``None``."""
    e = as_bits(bits)
    cus = cumulative_sums(e)
    ser = serial(e, serial_m)
    return {
        "monobit": monobit(e),
        "block_frequency": block_frequency(e, block),
        "runs": runs(e),
        "longest_run": longest_run(e),
        "cusum_forward": None if cus is None else cus[0],
        "cusum_backward": None if cus is None else cus[1],
        "approximate_entropy": approximate_entropy(e, apen_m),
        "serial_1": None if ser is None else ser[0],
        "serial_2": None if ser is None else ser[1],
    }


def subset_passed(pvalues: dict[str, float | None], alpha: float = ALPHA) -> bool:
    """True when at least one test ran and every test that ran has p >= alpha."""
    ran = [p for p in pvalues.values() if p is not None]
    return bool(ran) and all(p >= alpha for p in ran)
