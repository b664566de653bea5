"""Public verification of revealed detection lists.

Each channel pair is checked two ways: the coincidence-to-accidental ratio
(CAR) of exact (index, bin) matches, and a chi-square test of the matched
bins against the agreed pump shape.  Accidentals are estimated from matches
between index ``t`` on one node and ``t + d`` on the other for
``0 < |d| <= max_offset``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import gammaincc

from .quantum_sim import NodeRecords

DEFAULT_MAX_OFFSET = 10
DEFAULT_WINDOW_BINS = 2  # +-500 ps at 250 ps bins
MIN_EXPECTED = 5.0


def dense_bins(rec: NodeRecords, span: int) -> np.ndarray:
    """Index-addressed bin array of length ``span`` with -1 for empty periods."""
    out = np.full(span, -1, dtype=np.int64)
    if len(rec):
        out[rec.index] = rec.bin
    return out


def _span(*recs: NodeRecords) -> int:
    return max((int(r.index[-1]) + 1 for r in recs if len(r)), default=0)


def _lookup(dense: np.ndarray, index: np.ndarray) -> np.ndarray:
    """dense[index] with -1 for indices outside the array."""
    ok = (index >= 0) & (index < dense.size)
    out = np.full(index.size, -1, dtype=np.int64)
    out[ok] = dense[index[ok]]
    return out


@dataclass(frozen=True)
class CoincidenceHistogram:
    offsets: np.ndarray
    counts: np.ndarray

    def count_at(self, offset: int) -> int:
        return int(self.counts[np.flatnonzero(self.offsets == offset)[0]])

    @property
    def peak(self) -> int:
        return self.count_at(0)

    def off_peak(self) -> np.ndarray:
        return self.counts[self.offsets != 0]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["offset", "count"])
            w.writerows(zip(self.offsets.tolist(), self.counts.tolist()))


def coincidence_histogram(rec_i: NodeRecords, rec_j: NodeRecords,
                          max_offset: int = DEFAULT_MAX_OFFSET,
                          dense_j: np.ndarray | None = None) -> CoincidenceHistogram:
    """Equal-bin matches between index t of ``rec_i`` and t + d of ``rec_j``."""
    if dense_j is None:
        dense_j = dense_bins(rec_j, _span(rec_j))
    offsets = np.arange(-max_offset, max_offset + 1)
    counts = np.empty(offsets.size, dtype=np.int64)
    idx = rec_i.index
    if idx.size and (idx[0] < 0 or idx[-1] >= dense_j.size or np.any(np.diff(idx) < 0)):
        for k, d in enumerate(offsets):
            counts[k] = np.count_nonzero(_lookup(dense_j, idx + d) == rec_i.bin)
    else:
        # pad with empty periods so every shifted index stays in bounds
        padded = np.pad(dense_j, max_offset, constant_values=-1)
        for k, d in enumerate(offsets):
            counts[k] = np.count_nonzero(padded[idx + (d + max_offset)] == rec_i.bin)
    return CoincidenceHistogram(offsets, counts)


def compute_car(hist: CoincidenceHistogram) -> float:
    if hist.offsets.size < 3:
        raise ValueError("CAR needs at least one offset on each side of the peak")
    background = float(hist.off_peak().mean())
    if hist.peak == 0:
        # no coincidences at all is no evidence of correlation, even when 0/0
        return 0.0
    if background == 0.0:
        return math.inf
    return hist.peak / background


@dataclass(frozen=True)
class GofReport:
    statistic: float
    dof: int
    p_value: float
    passed: bool

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "dof": self.dof,
                "p_value": self.p_value, "passed": self.passed}

    @classmethod
    def from_dict(cls, d: dict) -> "GofReport":
        return cls(float(d["statistic"]), int(d["dof"]), float(d["p_value"]), bool(d["passed"]))


def chi2_sf(statistic: float, dof: int) -> float:
    """Upper tail of the chi-square distribution via the regularised gamma Q."""
    return float(gammaincc(dof / 2.0, statistic / 2.0))


def _merge_sparse(observed: np.ndarray, expected: np.ndarray):
    """Merge runs of adjacent categories until every group expects >= 5."""
    obs_groups, exp_groups = [], []
    acc_o = acc_e = 0.0
    for o, e in zip(observed.tolist(), expected.tolist()):
        acc_o += o
        acc_e += e
        if acc_e >= MIN_EXPECTED:
            obs_groups.append(acc_o)
            exp_groups.append(acc_e)
            acc_o = acc_e = 0.0
    if acc_e > 0 or acc_o > 0:
        if exp_groups:
            obs_groups[-1] += acc_o
            exp_groups[-1] += acc_e
        else:
            obs_groups.append(acc_o)
            exp_groups.append(acc_e)
    return np.array(obs_groups), np.array(exp_groups)


def chi_square_gof(observed, expected_pdf, alpha: float = 0.01) -> GofReport:
    """Pearson goodness of fit of category counts against a probability vector."""
    observed = np.asarray(observed, dtype=float)
    pdf = np.asarray(expected_pdf, dtype=float)
    if observed.shape != pdf.shape:
        raise ValueError("observed and expected_pdf must have the same shape")
    total = observed.sum()
    if total <= 0:
        raise ValueError("all-zero observations")
    obs, exp = _merge_sparse(observed, pdf / pdf.sum() * total)
    if obs.size < 2:
        raise ValueError(f"too few observations ({int(total)}) for a chi-square test")
    stat = float(((obs - exp) ** 2 / exp).sum())
    dof = int(obs.size - 1)
    p = chi2_sf(stat, dof)
    return GofReport(stat, dof, p, p >= alpha)


@dataclass(frozen=True)
class PairVerdict:
    pair: tuple[int, int]
    coincidences: int
    window_coincidences: int
    accidentals: float
    car: float
    discord: int
    gof: GofReport | None
    passed: bool

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "coincidences": self.coincidences,
            "window_coincidences": self.window_coincidences,
            "accidentals": self.accidentals,
            "car": self.car,
            "discord": self.discord,
            "gof": None if self.gof is None else self.gof.to_dict(),
            "passed": self.passed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PairVerdict":
        car = d["car"]
        return cls(
            tuple(d["pair"]), int(d["coincidences"]), int(d["window_coincidences"]),
            float(d["accidentals"]), math.inf if car == "inf" else float(car),
            int(d["discord"]), None if d["gof"] is None else GofReport.from_dict(d["gof"]),
            bool(d["passed"]),
        )


def verify_pair(rec_i: NodeRecords, rec_j: NodeRecords, params, *,
                dense_j: np.ndarray | None = None,
                histogram: CoincidenceHistogram | None = None) -> PairVerdict:
    """CAR gate plus bin-distribution test for one channel pair.

    ``params`` supplies ``car_threshold``, ``gof_alpha``, ``max_offset``,
    ``window_bins``, ``bins_per_period`` and ``pump_shape``.
    """
    if dense_j is None:
        dense_j = dense_bins(rec_j, _span(rec_j))
    if histogram is None:
        histogram = coincidence_histogram(rec_i, rec_j, params.max_offset, dense_j)
    car = compute_car(histogram)

    other = _lookup(dense_j, rec_i.index)
    present = other >= 0
    same = present & (other == rec_i.bin)
    window = present & (np.abs(other - rec_i.bin) <= params.window_bins)

    nbins = params.bins_per_period
    observed = np.bincount(rec_i.bin[same], minlength=nbins)[:nbins]
    try:
        gof = chi_square_gof(observed, params.pump_shape.pdf(nbins), params.gof_alpha)
    except ValueError:
        gof = None
    passed = car >= params.car_threshold and gof is not None and gof.passed
    return PairVerdict(
        pair=(rec_i.node, rec_j.node),
        coincidences=int(same.sum()),
        window_coincidences=int(window.sum()),
        accidentals=float(histogram.off_peak().mean()),
        car=car,
        discord=int((present & ~same).sum()),
        gof=gof,
        passed=bool(passed),
    )
