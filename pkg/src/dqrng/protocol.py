"""Round state machine: classical reveal, quantum reveal, verification,
selection of quantum values by the classical lists, and aggregation.

Everything after the reveals is deterministic set algebra over public data,
so any observer holding the transcript can recompute the output
(:func:`replay`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .canonical import canonical_bytes, int_array, parse_int, sha256_hex
from .errors import (ConfigurationError, DuplicateReveal, EmptySelection,
                     InsufficientEntropy, MalformedReveal, PhaseViolation,
                     VerificationFailed)
from .quantum_sim import DEFAULT_BIN_WIDTH_PS, DEFAULT_PERIOD_PS, NodeRecords, PumpShape
from .verify import (DEFAULT_MAX_OFFSET, DEFAULT_WINDOW_BINS, CoincidenceHistogram,
                     PairVerdict, _lookup, coincidence_histogram, dense_bins, verify_pair)


class Phase(str, Enum):
    REVEAL_CLASSICAL = "REVEAL_CLASSICAL"
    QUANTUM_MEASURE = "QUANTUM_MEASURE"
    QUANTUM_REVEAL = "QUANTUM_REVEAL"
    VERIFY = "VERIFY"
    OUTPUT = "OUTPUT"


class AggFn(str, Enum):
    SUM_MOD = "sum_mod"
    XOR_FOLD = "xor_fold"


@dataclass(frozen=True)
class SessionParams:
    """Everything the participants agree on before a round starts.

    Classical values and quantum indices share the index domain
    ``[0, n_pulses)``; ``[b_lo, b_hi]`` bounds only the final output.  With
    weights, the output is a participant number ``b_lo + i`` drawn with
    probability ``weights[i]``, and ``selection_resolution`` is the size of
    the intermediate uniform aggregate fed through the inverse CDF.
    """

    n: int
    l: int
    b_lo: int
    b_hi: int
    m: int
    n_pulses: int
    weights: tuple[float, ...] | None = None
    agg_fn: AggFn = AggFn.SUM_MOD
    car_threshold: float = 50.0
    gof_alpha: float = 1e-6
    pump_shape: PumpShape = field(default_factory=PumpShape.uniform)
    period_ps: int = DEFAULT_PERIOD_PS
    bin_width_ps: int = DEFAULT_BIN_WIDTH_PS
    max_offset: int = DEFAULT_MAX_OFFSET
    window_bins: int = DEFAULT_WINDOW_BINS
    selection_resolution: int = 256

    def __post_init__(self):
        if self.n < 2:
            raise ConfigurationError("need at least two participants")
        if not self.m >= self.l >= 1:
            raise ConfigurationError("need m >= l >= 1")
        if self.b_hi < self.b_lo:
            raise ConfigurationError("need b_hi >= b_lo")
        if self.n_pulses < 1:
            raise ConfigurationError("n_pulses must be positive")
        if not self.car_threshold > 0:
            raise ConfigurationError("car_threshold must be positive")
        if not 0 < self.gof_alpha < 1:
            raise ConfigurationError("gof_alpha must be in (0, 1)")
        if self.period_ps % self.bin_width_ps or self.period_ps // self.bin_width_ps < 2:
            raise ConfigurationError("period_ps must be a multiple of bin_width_ps (>= 2 bins)")
        if self.max_offset < 1:
            raise ConfigurationError("max_offset must be >= 1")
        object.__setattr__(self, "agg_fn", AggFn(self.agg_fn))
        if self.weights is not None:
            w = tuple(float(x) for x in self.weights)
            if len(w) != self.n:
                raise ConfigurationError("one weight per participant")
            if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-9:
                raise ConfigurationError("weights must be non-negative and sum to 1")
            if self.b_hi - self.b_lo + 1 != self.n:
                raise ConfigurationError("weighted selection needs b_hi - b_lo + 1 == n")
            if self.selection_resolution < self.n:
                raise ConfigurationError("selection_resolution must be >= n")
            object.__setattr__(self, "weights", w)

    @property
    def p_num(self) -> int:
        return self.n * (self.n - 1) // 2

    @property
    def k(self) -> int:
        return self.n - 1

    @property
    def output_range(self) -> int:
        return self.b_hi - self.b_lo + 1

    @property
    def bins_per_period(self) -> int:
        return self.period_ps // self.bin_width_ps

    @property
    def target_pdf(self) -> np.ndarray:
        """Agreed distribution of each output value over ``[b_lo, b_hi]``."""
        if self.weights is not None:
            return np.asarray(self.weights)
        return np.full(self.output_range, 1.0 / self.output_range)

    def pairs(self) -> list[tuple[int, int]]:
        return [(i, j) for i in range(self.n) for j in range(i + 1, self.n)]

    def to_dict(self) -> dict:
        return {
            "n": self.n, "l": self.l, "b_lo": self.b_lo, "b_hi": self.b_hi, "m": self.m,
            "n_pulses": self.n_pulses,
            "weights": None if self.weights is None else list(self.weights),
            "agg_fn": self.agg_fn.value, "car_threshold": self.car_threshold,
            "gof_alpha": self.gof_alpha, "pump_shape": self.pump_shape.to_dict(),
            "period_ps": self.period_ps, "bin_width_ps": self.bin_width_ps,
            "max_offset": self.max_offset, "window_bins": self.window_bins,
            "selection_resolution": self.selection_resolution,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionParams":
        d = dict(d)
        d["pump_shape"] = PumpShape.from_dict(d["pump_shape"])
        for key in ("n", "l", "b_lo", "b_hi", "m", "n_pulses"):
            d[key] = parse_int(d[key])
        if d.get("weights") is not None:
            d["weights"] = tuple(d["weights"])
        return cls(**d)


@dataclass
class ClassicalReveal:
    participant: int
    values: np.ndarray
    weight: float | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)

    def to_dict(self) -> dict:
        return {"participant": self.participant, "values": self.values, "weight": self.weight}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassicalReveal":
        return cls(parse_int(d["participant"]), int_array(d["values"]),
                   None if d.get("weight") is None else float(d["weight"]))


# ---------------------------------------------------------------------------
# pure set algebra


def pairwise_intersect(rec_i: NodeRecords, rec_j: NodeRecords,
                       dense_j: np.ndarray | None = None):
    """Records present in both lists with equal bins.

    Returns ``(indices, bins, discord)`` where ``discord`` counts indices
    present in both lists with different bins.
    """
    if dense_j is None:
        span = int(rec_j.index[-1]) + 1 if len(rec_j) else 0
        dense_j = dense_bins(rec_j, span)
    other = _lookup(dense_j, rec_i.index)
    same = other == rec_i.bin
    discord = int(np.count_nonzero((other >= 0) & ~same))
    return rec_i.index[same], rec_i.bin[same], discord


def merge_pairs(matches: Sequence[tuple[np.ndarray, np.ndarray]]):
    """Union of per-pair matched lists keyed by index.

    An index reported by several pairs is kept once when all of them agree on
    the bin; otherwise it is dropped and counted in the returned conflict
    count.  Returns ``(index, bins, conflicts)`` sorted by index.
    """
    if not matches:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, 0
    idx = np.concatenate([m[0] for m in matches]).astype(np.int64)
    bins = np.concatenate([m[1] for m in matches]).astype(np.int64)
    if idx.size == 0:
        return idx, bins, 0
    order = np.lexsort((bins, idx))
    idx, bins = idx[order], bins[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    lo = bins[starts]
    hi = np.maximum.reduceat(bins, starts)
    agree = lo == hi
    return idx[starts][agree], lo[agree], int(np.count_nonzero(~agree))


def select_final(index: np.ndarray, bins: np.ndarray, combined_rc: np.ndarray):
    """Keep only quantum values whose index appears among the classical values."""
    keep = np.isin(index, combined_rc)
    return index[keep], bins[keep]


def consensus(quantum: Sequence[NodeRecords], combined_rc: np.ndarray, span: int | None = None):
    """Pairwise matches of every channel pair, merged, then selected by the classical lists.

    Returns ``(I, R^q, I_final, R^qc, conflicts)``.  ``span`` bounds the index
    domain; it defaults to one past the largest revealed index.
    """
    if span is None:
        span = max((int(q.index[-1]) + 1 for q in quantum if len(q)), default=0)
    dense = [dense_bins(q, span) for q in quantum]
    matches = []
    for i in range(len(quantum)):
        for j in range(i + 1, len(quantum)):
            idx, bins, _ = pairwise_intersect(quantum[i], quantum[j], dense[j])
            matches.append((idx, bins))
    merged_idx, merged_bins, conflicts = merge_pairs(matches)
    i_final, r_qc = select_final(merged_idx, merged_bins, np.asarray(combined_rc, dtype=np.int64))
    return merged_idx, merged_bins, i_final, r_qc, conflicts


def xor_fold(values: np.ndarray, domain: int) -> int:
    """XOR all values, fold the result down to ceil(log2(domain)) bits, reduce mod domain.

    When ``domain`` is not a power of two the final modulo over-weights the
    low residues by at most one count in ``2**bits``.
    """
    if domain <= 1:
        return 0
    bits = math.ceil(math.log2(domain))
    x = int(np.bitwise_xor.reduce(np.asarray(values, dtype=np.int64))) if len(values) else 0
    mask = (1 << bits) - 1
    while x >> bits:
        x = (x & mask) ^ (x >> bits)
    return x % domain


def sum_mod(values: np.ndarray, domain: int) -> int:
    return int(np.asarray(values, dtype=np.int64).sum()) % domain


def inverse_cdf(u: int, domain: int, weights: Sequence[float]) -> int:
    """Map a uniform integer in [0, domain) to an outcome with the given weights."""
    return int(np.searchsorted(_cdf_cuts(domain, weights), u, side="right"))


def _cdf_cuts(domain: int, weights: Sequence[float]) -> np.ndarray:
    cuts = np.floor(np.cumsum(weights) * domain + 0.5).astype(np.int64)
    cuts[-1] = domain
    return cuts


def aggregate(r_qc: np.ndarray, params: SessionParams) -> list[int]:
    """Split the selected values into ``l`` contiguous chunks and reduce each one."""
    r_qc = np.asarray(r_qc, dtype=np.int64)
    if r_qc.size < params.l:
        raise InsufficientEntropy(f"{r_qc.size} selected values for {params.l} outputs")
    domain = params.selection_resolution if params.weights else params.output_range
    # chunk boundaries as np.array_split: the first (size % l) chunks get one extra value
    base, extra = divmod(r_qc.size, params.l)
    sizes = np.full(params.l, base, dtype=np.int64)
    sizes[:extra] += 1
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    if params.agg_fn is AggFn.SUM_MOD:
        vals = (np.add.reduceat(r_qc, starts) % domain).tolist() if domain > 1 else [0] * params.l
    else:
        xs = np.bitwise_xor.reduceat(r_qc, starts).tolist()
        vals = [xor_fold(np.array([x]), domain) for x in xs]
    if params.weights:
        cuts = _cdf_cuts(domain, params.weights)
        vals = np.searchsorted(cuts, vals, side="right").tolist()
    return [params.b_lo + int(a) for a in vals]


# ---------------------------------------------------------------------------
# transcript


@dataclass
class RoundTranscript:
    params: SessionParams
    classical: list[ClassicalReveal]
    combined_rc: np.ndarray
    quantum: list[NodeRecords]
    verdicts: list[PairVerdict]
    merged_index: np.ndarray
    merged_bins: np.ndarray
    union_conflicts: int
    i_final: np.ndarray
    r_qc: np.ndarray
    output: list[int] | None
    phase_log: list[str]

    @property
    def m_double_prime(self) -> int:
        return int(sum(v.coincidences for v in self.verdicts))

    def to_canonical(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "classical": {
                "reveals": [r.to_dict() for r in self.classical],
                "combined": self.combined_rc,
            },
            "quantum": [{"participant": q.node, "index": q.index, "bin": q.bin}
                        for q in self.quantum],
            "verdicts": [v.to_dict() for v in self.verdicts],
            "i_final": self.i_final,
            "r_qc": self.r_qc,
            "output": self.output,
        }

    def canonical_bytes(self) -> bytes:
        return canonical_bytes(self.to_canonical())

    def sha256(self) -> str:
        return sha256_hex(self.canonical_bytes())


# ---------------------------------------------------------------------------
# session


class Session:
    """Single-writer state machine for one round.

    Submissions must be serialised by the caller; the transcript of a
    finished round is immutable and safe to share.
    """

    def __init__(self, params: SessionParams):
        self.params = params
        self.phase = Phase.REVEAL_CLASSICAL
        self.phase_log: list[str] = [Phase.REVEAL_CLASSICAL.value]
        self.classical: dict[int, ClassicalReveal] = {}
        self.quantum: dict[int, NodeRecords] = {}
        self.combined_rc = np.empty(0, dtype=np.int64)
        self.pdf_c: np.ndarray | None = None
        self.verdicts: list[PairVerdict] | None = None
        self.histograms: dict[tuple[int, int], CoincidenceHistogram] = {}
        self._matches: list[tuple[np.ndarray, np.ndarray]] = []
        self.merged_index = np.empty(0, dtype=np.int64)
        self.merged_bins = np.empty(0, dtype=np.int64)
        self.union_conflicts = 0
        self.i_final = np.empty(0, dtype=np.int64)
        self.r_qc = np.empty(0, dtype=np.int64)
        self.output: list[int] | None = None

    def _advance(self, phase: Phase) -> None:
        self.phase = phase
        self.phase_log.append(phase.value)

    def _check_participant(self, pid: int) -> None:
        if not 0 <= pid < self.params.n:
            raise MalformedReveal(f"unknown participant {pid}")

    # -- step 1 --------------------------------------------------------------
    def submit_classical(self, reveal: ClassicalReveal) -> Phase:
        if self.phase is not Phase.REVEAL_CLASSICAL:
            raise PhaseViolation(f"classical reveal during {self.phase.value}")
        p = self.params
        self._check_participant(reveal.participant)
        if reveal.participant in self.classical:
            raise DuplicateReveal(f"participant {reveal.participant} already revealed")
        if reveal.values.shape != (p.m,):
            raise MalformedReveal(f"expected {p.m} values, got {reveal.values.size}")
        if p.m and (reveal.values.min() < 0 or reveal.values.max() >= p.n_pulses):
            raise MalformedReveal(f"classical values must lie in [0, {p.n_pulses})")
        if reveal.weight is not None:
            if not reveal.weight >= 0:
                raise MalformedReveal("weight must be non-negative")
            if p.weights is not None and abs(reveal.weight - p.weights[reveal.participant]) > 1e-9:
                raise MalformedReveal("revealed weight disagrees with the agreed weights")
        self.classical[reveal.participant] = reveal
        if len(self.classical) == p.n:
            self._close_classical()
        return self.phase

    def _close_classical(self) -> None:
        reveals = [self.classical[i] for i in range(self.params.n)]
        self.combined_rc = np.unique(np.concatenate([r.values for r in reveals]))
        if all(r.weight is not None for r in reveals):
            w = np.array([r.weight for r in reveals])
            if abs(w.sum() - 1.0) > 1e-9:
                raise MalformedReveal("revealed weights do not sum to 1")
            self.pdf_c = w
        elif self.params.weights is not None:
            self.pdf_c = np.asarray(self.params.weights)
        else:
            self.pdf_c = self.params.target_pdf
        self._advance(Phase.QUANTUM_MEASURE)

    # -- steps 2-3 -----------------------------------------------------------
    def submit_quantum(self, participant: int, records: NodeRecords) -> Phase:
        if self.phase not in (Phase.QUANTUM_MEASURE, Phase.QUANTUM_REVEAL):
            raise PhaseViolation(f"quantum reveal during {self.phase.value}")
        p = self.params
        self._check_participant(participant)
        if participant in self.quantum:
            raise DuplicateReveal(f"participant {participant} already revealed")
        idx, bins = records.index, records.bin
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise MalformedReveal("indices must be strictly ascending")
            if idx[0] < 0 or idx[-1] >= p.n_pulses:
                raise MalformedReveal(f"indices must lie in [0, {p.n_pulses})")
            if bins.min() < 0 or bins.max() >= p.bins_per_period:
                raise MalformedReveal(f"bins must lie in [0, {p.bins_per_period})")
        if self.phase is Phase.QUANTUM_MEASURE:
            self._advance(Phase.QUANTUM_REVEAL)
        self.quantum[participant] = NodeRecords(participant, idx, bins)
        if len(self.quantum) == p.n:
            self._advance(Phase.VERIFY)
        return self.phase

    # -- verification --------------------------------------------------------
    def verify(self) -> list[PairVerdict]:
        if self.phase is not Phase.VERIFY:
            raise PhaseViolation(f"verification during {self.phase.value}")
        if self.verdicts is not None:
            return self.verdicts
        p = self.params
        dense = {i: dense_bins(self.quantum[i], p.n_pulses) for i in range(p.n)}
        verdicts, matches = [], []
        for i, j in p.pairs():
            hist = coincidence_histogram(self.quantum[i], self.quantum[j], p.max_offset, dense[j])
            v = verify_pair(self.quantum[i], self.quantum[j], p, dense_j=dense[j], histogram=hist)
            self.histograms[(i, j)] = hist
            idx, bins, _ = pairwise_intersect(self.quantum[i], self.quantum[j], dense[j])
            verdicts.append(v)
            matches.append((idx, bins))
        self.verdicts = verdicts
        self._matches = matches
        return verdicts

    @property
    def verified(self) -> bool:
        return self.verdicts is not None and all(v.passed for v in self.verdicts)

    # -- step 4 --------------------------------------------------------------
    def consensus2(self):
        """Merge matched pairs and select by the classical lists.

        Returns ``(I, R^q, I_final, R^qc)``.
        """
        if self.phase is not Phase.VERIFY or self.verdicts is None:
            raise PhaseViolation("consensus 2 requires completed verification")
        failed = [v.pair for v in self.verdicts if not v.passed]
        if failed:
            raise VerificationFailed(failed)
        self.merged_index, self.merged_bins, self.union_conflicts = merge_pairs(self._matches)
        self.i_final, self.r_qc = select_final(self.merged_index, self.merged_bins,
                                               self.combined_rc)
        if self.i_final.size == 0:
            raise EmptySelection("no merged index appears in the classical lists")
        self._advance(Phase.OUTPUT)
        return self.merged_index, self.merged_bins, self.i_final, self.r_qc

    # -- step 5 --------------------------------------------------------------
    def compute_output(self) -> list[int]:
        if self.phase is not Phase.OUTPUT:
            raise PhaseViolation(f"output requested during {self.phase.value}")
        if self.output is None:
            self.output = aggregate(self.r_qc, self.params)
        return self.output

    def transcript(self) -> RoundTranscript:
        n = self.params.n
        return RoundTranscript(
            params=self.params,
            classical=[self.classical[i] for i in range(n) if i in self.classical],
            combined_rc=self.combined_rc,
            quantum=[self.quantum[i] for i in range(n) if i in self.quantum],
            verdicts=list(self.verdicts or []),
            merged_index=self.merged_index,
            merged_bins=self.merged_bins,
            union_conflicts=self.union_conflicts,
            i_final=self.i_final,
            r_qc=self.r_qc,
            output=None if self.output is None else list(self.output),
            phase_log=list(self.phase_log),
        )


def new_session(params: SessionParams) -> Session:
    return Session(params)


def run_public_steps(session: Session) -> list[int]:
    """Verification, selection and output once all reveals are in."""
    session.verify()
    session.consensus2()
    return session.compute_output()


def replay(doc: dict) -> RoundTranscript:
    """Recompute a round from the reveals in a canonical transcript document."""
    params = SessionParams.from_dict(doc["params"])
    s = Session(params)
    for r in doc["classical"]["reveals"]:
        s.submit_classical(ClassicalReveal.from_dict(r))
    for q in doc["quantum"]:
        pid = parse_int(q["participant"])
        s.submit_quantum(pid, NodeRecords(pid, int_array(q["index"]), int_array(q["bin"])))
    s.verify()
    if s.verified:
        try:
            s.consensus2()
        except EmptySelection:
            return s.transcript()
        s.compute_output()
    return s.transcript()


def audit(doc: dict) -> bool:
    """True when replaying the reveals reproduces every recorded public value."""
    return canonical_bytes(replay(doc).to_canonical()) == canonical_bytes(doc)


__all__ = [
    "AggFn", "ClassicalReveal", "Phase", "RoundTranscript", "Session", "SessionParams",
    "aggregate", "audit", "consensus", "inverse_cdf", "merge_pairs", "new_session", "pairwise_intersect",
    "replay", "run_public_steps", "select_final", "sum_mod", "xor_fold",
]
