"""Multi-round experiments, presets and CSV/JSON artifacts."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .adversary import Strategy, prediction_advantage, validate_strategies
from .canonical import canonical_bytes
from .errors import ConfigurationError
from .nist import TEST_NAMES, nist_subset, subset_passed, values_to_bits
from .protocol import SessionParams
from .quantum_sim import PumpShape, SourceConfig
from .rounds import EMPTY, INSUFFICIENT, OK, REJECTED, RoundResult, run_round
from .seeding import split_seed
from .transport import LoopbackBus, TcpBus
from .verify import chi_square_gof

log = logging.getLogger(__name__)

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3
NIST_MIN_BITS = 100_000


class Case(str, Enum):
    CASE1 = "case1"
    CASE2 = "case2"
    CUSTOM = "custom"


@dataclass
class ExperimentConfig:
    case: Case
    trials: int
    session: SessionParams
    source: SourceConfig
    strategies: tuple[Strategy, ...]
    output_dir: Path | None = None
    seed: int = 0
    tcp_ports: list[int] | None = None
    save_transcripts: bool | None = None
    max_reruns: int = 10
    allow_full_collusion: bool = False

    def __post_init__(self):
        self.case = Case(self.case)
        self.strategies = tuple(s if isinstance(s, Strategy) else Strategy.parse(s)
                                for s in self.strategies)
        if self.output_dir is not None:
            self.output_dir = Path(self.output_dir)
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if not self.session.n == self.source.n_nodes == len(self.strategies):
            raise ConfigurationError("participant count differs across session, source and strategies")
        if self.session.n_pulses != self.source.n_pulses:
            raise ConfigurationError("session and source must share n_pulses")
        if self.tcp_ports is not None and len(self.tcp_ports) not in (0, self.session.n):
            raise ConfigurationError(f"--tcp needs {self.session.n} ports (or none for ephemeral)")
        validate_strategies(self.strategies, self.session.n, self.allow_full_collusion)


# -- presets -------------------------------------------------------------------


def _pump(kind: str, period_ps: int, bin_width_ps: int) -> PumpShape:
    return PumpShape.default_for(kind, period_ps // bin_width_ps)


def case1_config(trials: int = 100, seed: int = 0, n: int = 4, pump: str = "uniform",
                 **overrides) -> ExperimentConfig:
    """8-bit outputs in [1, 256], 1024 per round."""
    n_pulses = 100_000
    shape = _pump(pump, 100_000, 250)
    session = SessionParams(n=n, l=1024, b_lo=1, b_hi=256, m=n_pulses // 4,
                            n_pulses=n_pulses, pump_shape=shape)
    source = SourceConfig(n, n_pulses, pair_rate=0.5, pump_shape=shape, loss_per_node=0.2)
    return ExperimentConfig(Case.CASE1, trials, session, source,
                            tuple(Strategy() for _ in range(n)), seed=seed, **overrides)


def case2_config(trials: int = 10_000, seed: int = 0, n: int = 4, pump: str = "uniform",
                 weights=None, **overrides) -> ExperimentConfig:
    """Leader election: output is a participant number in [0, n-1]."""
    n_pulses = 20_000
    shape = _pump(pump, 100_000, 250)
    weights = tuple(weights) if weights is not None else (1.0 / n,) * n
    session = SessionParams(n=n, l=1, b_lo=0, b_hi=n - 1, m=n_pulses // 4, n_pulses=n_pulses,
                            weights=weights, pump_shape=shape)
    source = SourceConfig(n, n_pulses, pair_rate=0.3, pump_shape=shape, loss_per_node=0.3)
    return ExperimentConfig(Case.CASE2, trials, session, source,
                            tuple(Strategy() for _ in range(n)), seed=seed, **overrides)


def default_source(n: int = 4, n_pulses: int = 100_000, pump: str = "gaussian",
                   **kw) -> SourceConfig:
    """Desk-scale source: 10^5 periods, pair probability 0.1, 50% loss per node."""
    return SourceConfig(n, n_pulses, pair_rate=kw.pop("pair_rate", 0.1),
                        pump_shape=_pump(pump, 100_000, 250),
                        loss_per_node=kw.pop("loss_per_node", 0.5), **kw)


def custom_config(trials: int = 10, seed: int = 0, n: int = 4, pump: str = "gaussian",
                  b_lo: int = 0, b_hi: int = 255, l: int = 1, n_pulses: int = 100_000,
                  **overrides) -> ExperimentConfig:
    source = default_source(n, n_pulses, pump)
    session = SessionParams(n=n, l=l, b_lo=b_lo, b_hi=b_hi, m=n_pulses // 4,
                            n_pulses=n_pulses, pump_shape=source.pump_shape)
    return ExperimentConfig(Case.CUSTOM, trials, session, source,
                            tuple(Strategy() for _ in range(n)), seed=seed, **overrides)


def nist_stream_params(n: int = 4, n_pulses: int = 1_000_000) -> tuple[SessionParams, SourceConfig]:
    """One round yielding 62500 bytes (500000 bits) of output."""
    shape = PumpShape.uniform()
    session = SessionParams(n=n, l=62_500, b_lo=0, b_hi=255, m=n_pulses, n_pulses=n_pulses,
                            pump_shape=shape)
    source = SourceConfig(n, n_pulses, pair_rate=0.9, pump_shape=shape, loss_per_node=0.1)
    return session, source


# -- running -------------------------------------------------------------------


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    results: list[RoundResult]
    reruns: int
    outputs: np.ndarray
    chi_square: dict | None
    frequencies: list[dict]
    nist: dict | None
    statuses: dict[str, int] = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        if self.statuses.get(REJECTED):
            return EXIT_VERIFY
        if self.statuses.get(EMPTY) or self.statuses.get(INSUFFICIENT):
            return EXIT_DATA
        return EXIT_OK

    @property
    def max_relative_error(self) -> float:
        return max((abs(r["relative_error"]) for r in self.frequencies), default=math.nan)

    def summary(self) -> dict:
        return {
            "case": self.config.case.value,
            "trials": self.config.trials,
            "seed": self.config.seed,
            "statuses": self.statuses,
            "reruns": self.reruns,
            "outputs": int(self.outputs.size),
            "chi_square": self.chi_square,
            "max_relative_error": self.max_relative_error if self.frequencies else None,
            "nist": self.nist,
            "exit_code": self.exit_code,
        }


def _make_bus(config: ExperimentConfig):
    if config.tcp_ports is None:
        return LoopbackBus(config.session.n)
    return TcpBus(config.session.n, config.tcp_ports or None)


def run_trials(config: ExperimentConfig, bus=None) -> tuple[list[RoundResult], int]:
    """Play every trial; empty or too-small selections are rerun with a fresh seed."""
    results, reruns = [], 0
    own_bus = bus is None
    bus = bus or _make_bus(config)
    try:
        for trial in range(config.trials):
            attempt = 0
            while True:
                seed = split_seed(config.seed, "trial", trial, "attempt", attempt)
                res = run_round(config.session, config.source, config.strategies, seed, bus)
                if res.status in (EMPTY, INSUFFICIENT) and attempt < config.max_reruns:
                    log.info("trial %d: %s selection, rerunning", trial, res.status)
                    attempt += 1
                    reruns += 1
                    continue
                break
            results.append(res)
    finally:
        if own_bus:
            bus.close()
    return results, reruns


def pooled_outputs(results) -> np.ndarray:
    outs = [np.asarray(r.output, dtype=np.int64) for r in results if r.status == OK]
    return np.concatenate(outs) if outs else np.empty(0, np.int64)


def frequency_table(outputs: np.ndarray, params: SessionParams) -> list[dict]:
    counts = np.bincount(outputs - params.b_lo, minlength=params.output_range)
    total = max(int(counts.sum()), 1)
    rows = []
    for k, (c, p) in enumerate(zip(counts.tolist(), params.target_pdf.tolist())):
        prob = c / total
        rows.append({"value": params.b_lo + k, "count": c, "probability": prob,
                     "expected": p, "relative_error": (prob - p) / p if p else math.nan})
    return rows


def uniformity(outputs: np.ndarray, params: SessionParams, alpha: float = 0.01) -> dict | None:
    if outputs.size == 0 or params.output_range < 2:
        return None
    counts = np.bincount(outputs - params.b_lo, minlength=params.output_range)
    try:
        rep = chi_square_gof(counts, params.target_pdf, alpha)
    except ValueError:
        return None
    return rep.to_dict()


def output_stream_nist(outputs: np.ndarray, params: SessionParams) -> dict | None:
    """NIST subset on the pooled outputs, 8 bits each, when they are bytes."""
    if params.output_range != 256 or params.weights is not None:
        return None
    bits = values_to_bits(outputs - params.b_lo, 8)
    if bits.size < NIST_MIN_BITS:
        return None
    p = nist_subset(bits)
    return {"bits": int(bits.size), "p_values": p, "passed": subset_passed(p)}


def run_experiment(config: ExperimentConfig, bus=None) -> ExperimentReport:
    results, reruns = run_trials(config, bus)
    statuses: dict[str, int] = {}
    for r in results:
        statuses[r.status] = statuses.get(r.status, 0) + 1
    outputs = pooled_outputs(results)
    report = ExperimentReport(config, results, reruns, outputs,
                              uniformity(outputs, config.session),
                              frequency_table(outputs, config.session) if outputs.size else [],
                              output_stream_nist(outputs, config.session), statuses)
    if config.output_dir is not None:
        write_artifacts(report)
    return report


def measure_prediction_advantage(config: ExperimentConfig, n_rounds: int | None = None):
    """Score the first declared prediction of each round against its first output."""
    if n_rounds is not None:
        config = replace(config, trials=n_rounds)
    results, _ = run_trials(config)
    guesses, outs = [], []
    for r in results:
        if r.predictions and r.output:
            guesses.append(r.predictions[min(r.predictions)])
            outs.append(r.output[0])
    return prediction_advantage(guesses, outs, config.session.output_range), results


# -- artifacts -----------------------------------------------------------------


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_artifacts(report: ExperimentReport) -> None:
    cfg = report.config
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.session

    _write_csv(out / "rounds.csv", ["trial", "seed", "status", "n_final", "first_output",
                                    "transcript_sha256"],
               [(k, r.seed, r.status, int(r.transcript.i_final.size),
                 r.output[0] if r.output else "", r.sha256)
                for k, r in enumerate(report.results)])
    if report.frequencies:
        _write_csv(out / "frequencies.csv",
                   ["value", "count", "probability", "expected", "relative_error"],
                   [(r["value"], r["count"], r["probability"], r["expected"],
                     r["relative_error"]) for r in report.frequencies])
        if params.weights is not None:
            _write_csv(out / "win_rates.csv", ["participant", "wins", "win_rate", "weight",
                                               "relative_error"],
                       [(r["value"] - params.b_lo, r["count"], r["probability"],
                         r["expected"], r["relative_error"]) for r in report.frequencies])
    if report.results:
        for (i, j), hist in report.results[0].histograms.items():
            hist.to_csv(out / f"histogram_{i}-{j}.csv")
    if report.nist is not None:
        p = report.nist["p_values"]
        _write_csv(out / "nist.csv", ["test", "p_value", "passed"],
                   [(name, "" if p[name] is None else p[name],
                     "" if p[name] is None else p[name] >= 0.01) for name in TEST_NAMES])

    save = cfg.save_transcripts if cfg.save_transcripts is not None else cfg.trials <= 100
    if save:
        tdir = out / "transcripts"
        tdir.mkdir(exist_ok=True)
        for k, r in enumerate(report.results):
            (tdir / f"round_{k:05d}.json").write_bytes(r.transcript.canonical_bytes())
    (out / "summary.json").write_bytes(canonical_bytes(report.summary()))
