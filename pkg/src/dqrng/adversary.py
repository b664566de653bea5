"""Participant behaviours, honest and dishonest.

A strategy decides what a participant publishes in the two reveal phases.
Dishonest strategies cover: fabricating detections outright, a coalition
that fabricates mutually consistent detections while keeping the genuine
matches with honest nodes, a last revealer grinding its classical list, a
node that has no quantum access and copies other reveals, and an outsider
who has taken over a node's identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigurationError
from .protocol import ClassicalReveal, SessionParams, aggregate, select_final
from .quantum_sim import NodeRecords, sample_bins
from .verify import _lookup, dense_bins


class Kind(str, Enum):
    HONEST = "honest"
    NAIVE_FABRICATOR = "naive"
    COLLUDING_FABRICATORS = "collude"
    LAST_REVEALER_BIAS = "lastrevealer"
    DIGITAL_EMULATOR = "emulator"
    MITM_TAKEOVER = "mitm"


@dataclass(frozen=True)
class Strategy:
    kind: Kind = Kind.HONEST
    members: frozenset[int] = frozenset()
    target: int | None = None
    victim: int | None = None
    alter: bool = False
    prediction: int | None = None
    fabricated_fraction: float = 0.02
    copy_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "members", frozenset(int(m) for m in self.members))
        if self.kind is Kind.COLLUDING_FABRICATORS and not self.members:
            raise ConfigurationError("a coalition needs its member set")
        if self.kind is Kind.LAST_REVEALER_BIAS and self.target is None:
            raise ConfigurationError("last-revealer bias needs a target value")
        if not 0 < self.fabricated_fraction < 1 or not 0 <= self.copy_fraction <= 1:
            raise ConfigurationError("fractions must lie in (0, 1)")

    @property
    def in_coalition(self) -> bool:
        return self.kind is Kind.COLLUDING_FABRICATORS or (
            self.kind is Kind.MITM_TAKEOVER and self.alter and bool(self.members))

    @property
    def late_classical(self) -> bool:
        return self.kind is Kind.LAST_REVEALER_BIAS

    @property
    def late_quantum(self) -> bool:
        return self.in_coalition or self.kind is Kind.DIGITAL_EMULATOR

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        """``honest[:guess]``, ``naive``, ``collude:1,2,3``, ``lastrevealer:42``,
        ``emulator``, ``mitm[:alter][:collude=1,2,3]``."""
        name, _, rest = text.strip().partition(":")
        args = [a for a in rest.split(":") if a] if rest else []
        try:
            kind = Kind(name.lower())
        except ValueError:
            raise ConfigurationError(f"unknown strategy {name!r}") from None
        try:
            if kind is Kind.HONEST:
                return cls(kind, prediction=int(args[0]) if args else None)
            if kind is Kind.COLLUDING_FABRICATORS:
                return cls(kind, members=frozenset(int(x) for x in args[0].split(",")))
            if kind is Kind.LAST_REVEALER_BIAS:
                return cls(kind, target=int(args[0]))
            if kind is Kind.MITM_TAKEOVER:
                members: frozenset[int] = frozenset()
                for a in args:
                    if a.startswith("collude="):
                        members = frozenset(int(x) for x in a[8:].split(","))
                return cls(kind, alter="alter" in args, members=members)
        except (IndexError, ValueError) as exc:
            raise ConfigurationError(f"bad strategy {text!r}: {exc}") from None
        return cls(kind)


def validate_strategies(strategies, n: int, allow_full_collusion: bool = False) -> None:
    if len(strategies) != n:
        raise ConfigurationError(f"{len(strategies)} strategies for {n} participants")
    dishonest = set()
    for pid, s in enumerate(strategies):
        if s.members and not s.members <= set(range(n)):
            raise ConfigurationError(f"participant {pid}: coalition names unknown participants")
        if s.in_coalition:
            if pid not in s.members:
                raise ConfigurationError(f"participant {pid} is not in its own coalition")
            dishonest |= s.members
        if s.kind is Kind.MITM_TAKEOVER and s.victim not in (None, pid):
            raise ConfigurationError("a takeover strategy is attached to its victim's node")
    if dishonest >= set(range(n)) and not allow_full_collusion:
        raise ConfigurationError("a coalition must leave at least one participant outside it")


@dataclass
class CoalitionPlan:
    """What the coalition agrees on privately before the round starts."""

    members: tuple[int, ...]
    fab_index: np.ndarray
    fab_bins: np.ndarray
    classical: dict[int, np.ndarray]


def plan_coalition(params: SessionParams, members, seed: int,
                   fabricated_fraction: float = 0.02) -> CoalitionPlan:
    """Shared fabricated detections, plus classical lists that jointly cover them."""
    rng = np.random.default_rng(seed)
    members = tuple(sorted(members))
    count = max(1, round(fabricated_fraction * params.n_pulses))
    fab_index = np.sort(rng.choice(params.n_pulses, count, replace=False)).astype(np.int64)
    fab_bins = sample_bins(params.pump_shape, params.bins_per_period, rng, count)
    classical = {}
    for k, pid in enumerate(members):
        mine = fab_index[k::len(members)][: params.m]
        filler = rng.integers(0, params.n_pulses, params.m - mine.size)
        classical[pid] = np.concatenate([mine, filler]).astype(np.int64)
    return CoalitionPlan(members, fab_index, fab_bins, classical)


def coalition_prediction(plan: CoalitionPlan, params: SessionParams) -> int | None:
    """First output value if only the coalition's own data reached the output."""
    rc = np.unique(np.concatenate(list(plan.classical.values())))
    _, r_qc = select_final(plan.fab_index, plan.fab_bins, rc)
    if r_qc.size < params.l:
        return None
    return aggregate(r_qc, params)[0]


@dataclass
class RoundView:
    """What one participant knows when it acts."""

    participant: int
    params: SessionParams
    rng: np.random.Generator
    classical: dict[int, ClassicalReveal] = field(default_factory=dict)
    quantum: dict[int, NodeRecords] = field(default_factory=dict)
    plan: CoalitionPlan | None = None


def _fresh_list(view: RoundView) -> np.ndarray:
    return view.rng.integers(0, view.params.n_pulses, view.params.m).astype(np.int64)


def declare_prediction(strategy: Strategy, view: RoundView) -> int | None:
    if strategy.prediction is not None:
        return strategy.prediction
    if strategy.kind is Kind.LAST_REVEALER_BIAS:
        return strategy.target
    if strategy.in_coalition and view.plan is not None:
        return coalition_prediction(view.plan, view.params)
    return None


def _grind_towards(view: RoundView, target: int) -> np.ndarray:
    """Reuse the values others revealed and tweak one so the list sums to the target."""
    p = view.params
    others = [r.values for pid, r in sorted(view.classical.items()) if pid != view.participant]
    pool = np.unique(np.concatenate(others)) if others else np.empty(0, np.int64)
    pool = view.rng.permutation(pool)[: p.m]
    values = np.concatenate([pool, view.rng.integers(0, p.n_pulses, p.m - pool.size)])
    r = p.output_range
    shift = (int(values.sum()) - (target - p.b_lo)) % r
    v = int(values[-1]) - shift
    if v < 0:
        v += r * math.ceil(-v / r)
    if v < p.n_pulses:
        values[-1] = v
    return values.astype(np.int64)


def act_classical(strategy: Strategy, view: RoundView) -> ClassicalReveal:
    p = view.params
    weight = None if p.weights is None else p.weights[view.participant]
    if strategy.kind is Kind.COLLUDING_FABRICATORS:
        values = view.plan.classical[view.participant]
    elif strategy.kind is Kind.LAST_REVEALER_BIAS:
        values = _grind_towards(view, strategy.target)
    else:
        values = _fresh_list(view)
    return ClassicalReveal(view.participant, values, weight)


def _fabricate(view: RoundView, count: int, exclude: np.ndarray | None = None):
    p = view.params
    if exclude is not None and exclude.size:
        free = np.setdiff1d(np.arange(p.n_pulses), exclude, assume_unique=True)
        idx = view.rng.choice(free, min(count, free.size), replace=False)
    else:
        idx = view.rng.choice(p.n_pulses, min(count, p.n_pulses), replace=False)
    idx = np.sort(idx).astype(np.int64)
    return idx, sample_bins(p.pump_shape, p.bins_per_period, view.rng, idx.size)


def _union_first(parts) -> NodeRecords | tuple[np.ndarray, np.ndarray]:
    """Union of (index, bin) lists; on repeated indices the earliest part wins."""
    if not parts:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    idx = np.concatenate([a for a, _ in parts])
    bins = np.concatenate([b for _, b in parts])
    rank = np.concatenate([np.full(a.size, k) for k, (a, _) in enumerate(parts)])
    order = np.lexsort((rank, idx))
    idx, bins = idx[order], bins[order]
    first = np.r_[True, idx[1:] != idx[:-1]] if idx.size else np.empty(0, bool)
    return idx[first], bins[first]


def _colluder_records(view: RoundView, true: NodeRecords) -> NodeRecords:
    p, plan = view.params, view.plan
    honest = [j for j in range(p.n) if j not in plan.members and j in view.quantum]
    keep = np.zeros(len(true), dtype=bool)
    for j in honest:
        other = view.quantum[j]
        dense = dense_bins(other, p.n_pulses)
        keep |= _lookup(dense, true.index) == true.bin
    idx, bins = _union_first([(true.index[keep], true.bin[keep]),
                              (plan.fab_index, plan.fab_bins)])
    return NodeRecords(view.participant, idx, bins)


def _emulated_records(strategy: Strategy, view: RoundView) -> NodeRecords:
    parts = []
    for j, rec in sorted(view.quantum.items()):
        if j == view.participant or not len(rec):
            continue
        take = view.rng.random(len(rec)) < strategy.copy_fraction
        parts.append((rec.index[take], rec.bin[take]))
    copied, _ = _union_first(parts)
    invented = _fabricate(view, round(strategy.fabricated_fraction * view.params.n_pulses),
                          exclude=copied)
    idx, bins = _union_first(parts + [invented])
    return NodeRecords(view.participant, idx, bins)


def act_quantum(strategy: Strategy, view: RoundView, true: NodeRecords) -> NodeRecords:
    kind = strategy.kind
    if kind in (Kind.HONEST, Kind.LAST_REVEALER_BIAS):
        return true
    if strategy.in_coalition:
        return _colluder_records(view, true)
    if kind is Kind.NAIVE_FABRICATOR:
        idx, bins = _fabricate(view, len(true))
        return NodeRecords(view.participant, idx, bins)
    if kind is Kind.DIGITAL_EMULATOR:
        return _emulated_records(strategy, view)
    if kind is Kind.MITM_TAKEOVER:
        if not strategy.alter:
            return true
        p = view.params
        return NodeRecords(view.participant, true.index,
                           sample_bins(p.pump_shape, p.bins_per_period, view.rng, len(true)))
    raise ConfigurationError(f"unhandled strategy {kind}")


@dataclass(frozen=True)
class AdvantageReport:
    n_rounds: int
    hits: int
    frequency: float
    expected: float
    advantage: float
    sigma: float

    def within(self, k_sigma: float = 3.0) -> bool:
        if self.sigma == 0:
            return self.advantage == 0
        return abs(self.advantage) <= k_sigma * self.sigma


def prediction_advantage(predictions, outputs, output_range: int) -> AdvantageReport:
    """How often declared guesses hit the first output value, versus chance."""
    pairs = [(g, o) for g, o in zip(predictions, outputs) if g is not None and o is not None]
    if not pairs:
        raise ValueError("no declared predictions to score")
    n = len(pairs)
    hits = sum(1 for g, o in pairs if g == o)
    expected = 1.0 / output_range
    freq = hits / n
    return AdvantageReport(n, hits, freq, expected, freq - expected,
                           math.sqrt(expected * (1 - expected) / n))
