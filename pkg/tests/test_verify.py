import math
from types import SimpleNamespace

import mpmath
import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dqrng.quantum_sim import NodeRecords, PumpShape, SourceConfig, generate_round
from dqrng.verify import (CoincidenceHistogram, GofReport, PairVerdict, chi2_sf, chi_square_gof,
                          coincidence_histogram, compute_car, verify_pair)


def params(**kw):
    base = dict(car_threshold=50.0, gof_alpha=1e-6, max_offset=10, window_bins=2,
                bins_per_period=400, pump_shape=PumpShape.uniform())
    base.update(kw)
    return SimpleNamespace(**base)


def node_lists(max_index=60, max_bin=4):
    entry = st.dictionaries(st.integers(0, max_index), st.integers(0, max_bin), max_size=40)
    return entry


def as_records(node, d) -> NodeRecords:
    items = sorted(d.items())
    return NodeRecords(node, [i for i, _ in items], [b for _, b in items])


@settings(max_examples=200, deadline=None)
@given(a=node_lists(), b=node_lists(), k=st.integers(1, 6))
def test_histogram_matches_oracle(a, b, k):
    h = coincidence_histogram(as_records(0, a), as_records(1, b), k)
    ref = oracles.histogram(a, b, k)
    assert h.offsets.tolist() == sorted(ref)
    assert h.counts.tolist() == [ref[d] for d in sorted(ref)]


def test_histogram_with_out_of_range_dense():
    # indices beyond the partner's dense span take the masked path
    a = NodeRecords(0, [0, 5, 99], [1, 1, 1])
    b = NodeRecords(1, [5], [1])
    h = coincidence_histogram(a, b, 3)
    assert h.peak == 1 and h.off_peak().sum() == 0


class TestCar:
    def hist(self, counts):
        return CoincidenceHistogram(np.arange(-2, 3), np.asarray(counts))

    def test_ratio(self):
        assert compute_car(self.hist([2, 2, 100, 2, 2])) == 50.0

    def test_zero_background(self):
        assert compute_car(self.hist([0, 0, 7, 0, 0])) == math.inf

    def test_zero_peak_is_no_evidence(self):
        assert compute_car(self.hist([0, 0, 0, 0, 0])) == 0.0
        assert compute_car(self.hist([1, 0, 0, 0, 1])) == 0.0

    def test_needs_sidebands(self):
        with pytest.raises(ValueError):
            compute_car(CoincidenceHistogram(np.array([0]), np.array([3])))


class TestChiSquare:
    def test_matches_scipy_when_dense(self):
        rng = np.random.default_rng(2)
        pdf = PumpShape.gaussian(20, 6).pdf(40)
        obs = np.bincount(rng.choice(40, 50_000, p=pdf), minlength=40)
        rep = chi_square_gof(obs, pdf)
        ref = scipy.stats.chisquare(obs, pdf * obs.sum())
        assert rep.statistic == pytest.approx(ref.statistic, rel=1e-12)
        assert rep.p_value == pytest.approx(ref.pvalue, rel=1e-9)
        assert rep.dof == 39

    def test_sparse_categories_merged(self):
        obs = np.array([3, 0, 1, 10, 10, 1])
        pdf = np.array([0.1, 0.05, 0.05, 0.35, 0.35, 0.1])
        rep = chi_square_gof(obs, pdf)
        # expected 2.5, 1.25, 1.25 merge into one group of 5; the trailing 2.5 joins the last
        assert rep.dof == 2

    def test_rejects_wrong_distribution(self):
        obs = np.zeros(50)
        obs[:25] = 100
        assert not chi_square_gof(obs, np.full(50, 0.02), alpha=0.01).passed

    @pytest.mark.parametrize("obs", [np.zeros(5), np.array([1, 0, 0, 0, 0])])
    def test_degenerate_inputs(self, obs):
        with pytest.raises(ValueError):
            chi_square_gof(obs, np.full(5, 0.2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            chi_square_gof([1, 2], [0.2, 0.3, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(stat=st.floats(0, 5000), dof=st.integers(1, 600))
    def test_sf_matches_mpmath(self, stat, dof):
        ref = float(mpmath.gammainc(dof / 2, stat / 2, mpmath.inf, regularized=True))
        got = chi2_sf(stat, dof)
        if ref < 1e-280:
            assert got < 1e-270
        else:
            assert got == pytest.approx(ref, rel=1e-8)

    def test_report_round_trip(self):
        rep = GofReport(12.5, 7, 0.08, True)
        assert GofReport.from_dict(rep.to_dict()) == rep


@pytest.fixture(scope="module")
def honest_round():
    c = SourceConfig(4, 100_000, 0.1, PumpShape.default_for("gaussian"), loss_per_node=0.5,
                     dark_rate_per_node=2e-3, seed=3)
    return c, generate_round(c)


def test_honest_pair_passes(honest_round):
    c, nodes = honest_round
    p = params(pump_shape=c.pump_shape)
    for i in range(4):
        for j in range(i + 1, 4):
            v = verify_pair(nodes[i], nodes[j], p)
            assert v.passed, v
            assert v.car >= 50
            assert v.coincidences <= v.window_coincidences


def test_wrong_pump_shape_fails_gof(honest_round):
    c, nodes = honest_round
    v = verify_pair(nodes[0], nodes[1], params(pump_shape=PumpShape.uniform()))
    assert v.car >= 50 and not v.gof.passed and not v.passed


def test_independent_lists_fail(honest_round):
    c, nodes = honest_round
    rng = np.random.default_rng(1)
    idx = np.sort(rng.choice(100_000, len(nodes[1]), replace=False))
    fake = NodeRecords(1, idx, rng.integers(0, 400, idx.size))
    v = verify_pair(nodes[0], fake, params(pump_shape=c.pump_shape))
    assert v.car < 50 and not v.passed


def test_empty_list_fails(honest_round):
    c, nodes = honest_round
    v = verify_pair(nodes[0], NodeRecords.empty(1), params(pump_shape=c.pump_shape))
    assert v.car == 0.0 and v.gof is None and not v.passed


def test_verdict_round_trip(honest_round):
    c, nodes = honest_round
    v = verify_pair(nodes[0], nodes[1], params(pump_shape=c.pump_shape))
    assert PairVerdict.from_dict(v.to_dict()) == v
    inf = PairVerdict((0, 1), 3, 3, 0.0, math.inf, 0, None, False)
    d = inf.to_dict()
    d["car"] = "inf"
    assert PairVerdict.from_dict(d) == inf
