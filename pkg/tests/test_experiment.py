import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from dqrng.errors import ConfigurationError
from dqrng.experiment import (EXIT_DATA, EXIT_OK, EXIT_VERIFY, Case, ExperimentConfig,
                              case1_config, case2_config, custom_config, frequency_table,
                              measure_prediction_advantage, run_experiment)
from dqrng.protocol import SessionParams, audit
from dqrng.quantum_sim import SourceConfig
from dqrng.rounds import check_compatible, run_round
from dqrng.transport import LoopbackBus, TcpBus


def small(**kw):
    cfg = custom_config(trials=3, seed=5, n_pulses=10_000)
    return replace(cfg, **kw) if kw else cfg


def test_round_is_deterministic_and_transport_independent():
    cfg = small()
    strategies = ["honest", "collude:1,2", "collude:1,2", "lastrevealer:3"]
    a = run_round(cfg.session, cfg.source, strategies, 11)
    b = run_round(cfg.session, cfg.source, strategies, 11, LoopbackBus(4))
    with TcpBus(4) as bus:
        c = run_round(cfg.session, cfg.source, strategies, 11, bus)
    assert a.sha256 == b.sha256 == c.sha256
    assert run_round(cfg.session, cfg.source, strategies, 12).sha256 != a.sha256


def test_compatibility_checks():
    cfg = small()
    with pytest.raises(ConfigurationError):
        check_compatible(cfg.session, replace(cfg.source, n_nodes=3), ["honest"] * 4)
    with pytest.raises(ConfigurationError):
        check_compatible(cfg.session, replace(cfg.source, n_pulses=999), ["honest"] * 4)
    with pytest.raises(ConfigurationError):
        check_compatible(cfg.session, cfg.source, ["honest"] * 3)


def test_config_validation():
    cfg = small()
    with pytest.raises(ConfigurationError):
        replace(cfg, trials=0)
    with pytest.raises(ConfigurationError):
        replace(cfg, strategies=("honest",) * 3)
    with pytest.raises(ConfigurationError):
        replace(cfg, strategies=("collude:0,1,2,3",) * 4)
    with pytest.raises(ConfigurationError):
        replace(cfg, tcp_ports=[1, 2])
    assert replace(cfg, strategies=("collude:0,1,2,3",) * 4, allow_full_collusion=True)


def test_presets_are_consistent():
    c1, c2 = case1_config(), case2_config()
    assert (c1.case, c1.session.l, c1.session.b_lo, c1.session.b_hi) == (Case.CASE1, 1024, 1, 256)
    assert c2.session.weights == (0.25,) * 4 and (c2.session.b_lo, c2.session.b_hi) == (0, 3)
    assert c2.trials == 10_000
    assert case2_config(n=5).session.output_range == 5


def test_experiment_artifacts(tmp_path):
    cfg = small(output_dir=tmp_path)
    rep = run_experiment(cfg)
    assert rep.exit_code == EXIT_OK and rep.statuses == {"ok": 3}
    names = {p.name for p in tmp_path.iterdir()}
    assert {"rounds.csv", "frequencies.csv", "summary.json", "transcripts",
            "histogram_0-1.csv", "histogram_2-3.csv"} <= names
    rows = list(csv.DictReader(open(tmp_path / "rounds.csv")))
    assert len(rows) == 3
    for k, row in enumerate(rows):
        doc = json.loads((tmp_path / "transcripts" / f"round_{k:05d}.json").read_text())
        assert audit(doc)
        assert row["transcript_sha256"] == rep.results[k].sha256
    hist = list(csv.DictReader(open(tmp_path / "histogram_0-1.csv")))
    assert [int(r["offset"]) for r in hist] == list(range(-10, 11))
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["exit_code"] == 0 and summary["outputs"] == 3


def test_many_trials_skip_transcripts_unless_asked(tmp_path):
    cfg = small(trials=101, output_dir=tmp_path / "a")
    cfg = replace(cfg, session=replace(cfg.session, n_pulses=2_000, m=500),
                  source=replace(cfg.source, n_pulses=2_000, pair_rate=0.5, loss_per_node=0.2))
    run_experiment(cfg)
    assert not (tmp_path / "a" / "transcripts").exists()


def test_verification_failure_exit_code():
    rep = run_experiment(small(strategies=("honest", "naive", "honest", "honest")))
    assert rep.exit_code == EXIT_VERIFY
    assert rep.statuses == {"rejected": 3}


def test_empty_selection_rerun_then_insufficient():
    cfg = small(max_reruns=2)
    # a single classical value rarely lands on a matched period
    cfg = replace(cfg, session=replace(cfg.session, m=1))
    rep = run_experiment(cfg)
    assert rep.reruns > 0
    assert rep.exit_code in (EXIT_OK, EXIT_DATA)
    if rep.exit_code == EXIT_DATA:
        assert rep.statuses.get("empty", 0) > 0


def test_weighted_win_rates(tmp_path):
    cfg = case2_config(trials=40, seed=1, weights=(0.7, 0.1, 0.1, 0.1), output_dir=tmp_path)
    rep = run_experiment(cfg)
    rows = list(csv.DictReader(open(tmp_path / "win_rates.csv")))
    assert [int(r["participant"]) for r in rows] == [0, 1, 2, 3]
    assert sum(int(r["wins"]) for r in rows) == 40
    assert int(rows[0]["wins"]) > 15


def test_frequency_table():
    p = SessionParams(n=2, l=1, b_lo=1, b_hi=4, m=1, n_pulses=10)
    rows = frequency_table(np.array([1, 1, 2, 4]), p)
    assert [r["count"] for r in rows] == [2, 1, 0, 1]
    assert rows[0]["relative_error"] == pytest.approx(1.0)


def test_measure_prediction_advantage_requires_predictions():
    with pytest.raises(ValueError):
        measure_prediction_advantage(small())


def test_nist_report_on_byte_outputs():
    # 8-bit outputs from enough rounds produce a NIST table
    cfg = custom_config(trials=2, seed=3, l=7_000, n_pulses=100_000)
    cfg = replace(cfg, source=replace(cfg.source, pair_rate=0.5, loss_per_node=0.2),
                  session=replace(cfg.session, pump_shape=cfg.source.pump_shape))
    rep = run_experiment(cfg)
    assert rep.nist is not None and rep.nist["bits"] == 2 * 7_000 * 8
