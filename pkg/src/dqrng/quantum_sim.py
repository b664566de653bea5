"""Statistical model of the entangled-pair source and the N detection nodes.

One call to :func:`generate_round` covers ``n_pulses`` reference periods.  In
each period a photon pair is emitted with probability ``pair_rate``; both
photons share an emission time drawn from the pump shape, are routed
independently and uniformly over the nodes, survive channel loss
independently, and pick up independent Gaussian timing jitter before being
tagged with the reference-pulse index and the 250 ps time bin they fall in.
Dark counts arrive uniformly in time.  A node keeps at most one detection
per period (the earliest).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ConfigurationError

DEFAULT_PERIOD_PS = 100_000  # 10 MHz reference
DEFAULT_BIN_WIDTH_PS = 250
# SPD 33 ps and TDC 20 ps added in quadrature (~38.6 ps), rounded up
DEFAULT_JITTER_PS = 40.0

PUMP_KINDS = ("uniform", "gaussian", "rayleigh")


@dataclass(frozen=True)
class PumpShape:
    """Temporal envelope of the pump, in units of time bins."""

    kind: str = "uniform"
    mean_bin: float | None = None
    sigma_bins: float | None = None

    def __post_init__(self):
        if self.kind not in PUMP_KINDS:
            raise ConfigurationError(f"unknown pump shape {self.kind!r}")
        if self.kind in ("gaussian", "rayleigh"):
            if self.sigma_bins is None or not self.sigma_bins > 0:
                raise ConfigurationError(f"{self.kind} pump needs sigma_bins > 0")
        if self.kind == "gaussian" and self.mean_bin is None:
            raise ConfigurationError("gaussian pump needs mean_bin")

    @classmethod
    def uniform(cls) -> "PumpShape":
        return cls("uniform")

    @classmethod
    def gaussian(cls, mean_bin: float, sigma_bins: float) -> "PumpShape":
        return cls("gaussian", float(mean_bin), float(sigma_bins))

    @classmethod
    def rayleigh(cls, sigma_bins: float) -> "PumpShape":
        return cls("rayleigh", None, float(sigma_bins))

    @classmethod
    def default_for(cls, kind: str, bins_per_period: int = 400) -> "PumpShape":
        """Shapes used by the CLI ``--pump`` flag."""
        if kind == "uniform":
            return cls.uniform()
        if kind == "gaussian":
            return cls.gaussian(bins_per_period / 2, bins_per_period / 8)
        if kind == "rayleigh":
            return cls.rayleigh(bins_per_period / 5)
        raise ConfigurationError(f"unknown pump shape {kind!r}")

    def pdf(self, bins_per_period: int) -> np.ndarray:
        """Probability of each bin: the density integrated over the bin,
        renormalised over one period."""
        if bins_per_period < 2:
            raise ConfigurationError("bins_per_period must be >= 2")
        edges = np.arange(bins_per_period + 1, dtype=float)
        if self.kind == "uniform":
            return np.full(bins_per_period, 1.0 / bins_per_period)
        if self.kind == "gaussian":
            cdf = ndtr((edges - self.mean_bin) / self.sigma_bins)
        else:
            cdf = -np.expm1(-(edges**2) / (2.0 * self.sigma_bins**2))
        mass = np.diff(cdf)
        total = mass.sum()
        if not total > 0:
            raise ConfigurationError("pump shape has no mass inside the period")
        return mass / total

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mean_bin": self.mean_bin, "sigma_bins": self.sigma_bins}

    @classmethod
    def from_dict(cls, d: dict) -> "PumpShape":
        return cls(d["kind"], d.get("mean_bin"), d.get("sigma_bins"))


def sample_bins(shape: PumpShape, bins_per_period: int, rng: np.random.Generator,
                size: int) -> np.ndarray:
    """Inverse-CDF draw of ``size`` bins from the discretised pump shape."""
    cdf = np.cumsum(shape.pdf(bins_per_period))
    cdf[-1] = 1.0
    u = rng.random(size)
    return np.searchsorted(cdf, u, side="right").astype(np.int64)


def sample_bin(shape: PumpShape, bins_per_period: int, rng: np.random.Generator) -> int:
    return int(sample_bins(shape, bins_per_period, rng, 1)[0])


def quantize(arrival_ps: float, bin_width_ps: float = DEFAULT_BIN_WIDTH_PS,
             period_ps: float = DEFAULT_PERIOD_PS) -> int:
    """Time bin of an arrival measured from the start of its reference period."""
    if not 0 <= arrival_ps < period_ps:
        raise ValueError(f"arrival {arrival_ps} ps outside [0, {period_ps}); wrap it first")
    return int(math.floor(arrival_ps / bin_width_ps))


def _per_node(value, n: int, name: str) -> tuple[float, ...]:
    if np.isscalar(value):
        return (float(value),) * n
    out = tuple(float(v) for v in value)
    if len(out) != n:
        raise ConfigurationError(f"{name} needs {n} entries, got {len(out)}")
    return out


@dataclass(frozen=True)
class SourceConfig:
    n_nodes: int
    n_pulses: int
    pair_rate: float
    pump_shape: PumpShape = field(default_factory=PumpShape.uniform)
    period_ps: int = DEFAULT_PERIOD_PS
    bin_width_ps: int = DEFAULT_BIN_WIDTH_PS
    loss_per_node: float | Sequence[float] = 0.5
    jitter_sigma_ps: float = DEFAULT_JITTER_PS
    dark_rate_per_node: float | Sequence[float] = 2e-3
    seed: int = 0
    # "distinct" forces the two photons of a pair onto different nodes (test hook)
    routing: str = "uniform"

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ConfigurationError("n_nodes must be >= 1")
        if self.n_pulses < 1:
            raise ConfigurationError("n_pulses must be >= 1")
        if not 0.0 <= self.pair_rate <= 1.0:
            raise ConfigurationError("pair_rate must be in [0, 1]")
        if self.period_ps <= 0 or self.bin_width_ps <= 0 or self.period_ps % self.bin_width_ps:
            raise ConfigurationError("period_ps must be a positive multiple of bin_width_ps")
        if self.period_ps // self.bin_width_ps < 2:
            raise ConfigurationError("need at least 2 bins per period")
        if self.jitter_sigma_ps < 0:
            raise ConfigurationError("jitter_sigma_ps must be >= 0")
        if self.routing not in ("uniform", "distinct"):
            raise ConfigurationError(f"unknown routing {self.routing!r}")
        if self.routing == "distinct" and self.n_nodes < 2:
            raise ConfigurationError("distinct routing needs two nodes")
        loss = _per_node(self.loss_per_node, self.n_nodes, "loss_per_node")
        dark = _per_node(self.dark_rate_per_node, self.n_nodes, "dark_rate_per_node")
        if any(not 0.0 <= x <= 1.0 for x in loss):
            raise ConfigurationError("losses must be in [0, 1]")
        if any(x < 0 for x in dark):
            raise ConfigurationError("dark rates must be >= 0")
        object.__setattr__(self, "loss_per_node", loss)
        object.__setattr__(self, "dark_rate_per_node", dark)
        object.__setattr__(self, "seed", int(self.seed) & (2**64 - 1))

    @property
    def bins_per_period(self) -> int:
        return self.period_ps // self.bin_width_ps

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "n_pulses": self.n_pulses,
            "pair_rate": self.pair_rate,
            "pump_shape": self.pump_shape.to_dict(),
            "period_ps": self.period_ps,
            "bin_width_ps": self.bin_width_ps,
            "loss_per_node": list(self.loss_per_node),
            "jitter_sigma_ps": self.jitter_sigma_ps,
            "dark_rate_per_node": list(self.dark_rate_per_node),
            "seed": self.seed,
            "routing": self.routing,
        }


@dataclass(frozen=True)
class DetectionRecord:
    node: int
    index: int
    bin: int


@dataclass
class NodeRecords:
    """All detections of one node, as parallel index/bin arrays sorted by index."""

    node: int
    index: np.ndarray
    bin: np.ndarray

    def __post_init__(self):
        self.index = np.asarray(self.index, dtype=np.int64)
        self.bin = np.asarray(self.bin, dtype=np.int64)
        if self.index.shape != self.bin.shape or self.index.ndim != 1:
            raise ValueError("index and bin must be 1-D arrays of equal length")

    def __len__(self) -> int:
        return int(self.index.size)

    def __iter__(self) -> Iterator[DetectionRecord]:
        for i, b in zip(self.index.tolist(), self.bin.tolist()):
            yield DetectionRecord(self.node, i, b)

    @classmethod
    def empty(cls, node: int) -> "NodeRecords":
        return cls(node, np.empty(0, np.int64), np.empty(0, np.int64))

    @classmethod
    def from_records(cls, node: int, records: Iterable[DetectionRecord]) -> "NodeRecords":
        recs = list(records)
        return cls(node, [r.index for r in recs], [r.bin for r in recs])

    def is_canonical(self) -> bool:
        return bool(np.all(np.diff(self.index) > 0))

    def __eq__(self, other):
        if not isinstance(other, NodeRecords):
            return NotImplemented
        return (self.node == other.node and np.array_equal(self.index, other.index)
                and np.array_equal(self.bin, other.bin))


def generate_round(config: SourceConfig) -> list[NodeRecords]:
    """Simulate one collection window; returns one NodeRecords per node.

    The number of random draws does not depend on the losses, so raising a
    node's loss with everything else fixed only ever removes detections.
    """
    rng = np.random.default_rng(config.seed)
    n, T, bw = config.n_nodes, float(config.period_ps), float(config.bin_width_ps)
    nbins = config.bins_per_period

    emitted = np.flatnonzero(rng.random(config.n_pulses) < config.pair_rate)
    k = emitted.size
    emit_bin = sample_bins(config.pump_shape, nbins, rng, k)
    emit_t = (emit_bin + rng.random(k)) * bw
    if config.routing == "distinct":
        first = rng.integers(0, n, k)
        second = (first + rng.integers(1, n, k)) % n
        route = np.stack([first, second], axis=1)
    else:
        route = rng.integers(0, n, (k, 2))
    keep_p = 1.0 - np.asarray(config.loss_per_node)
    survive = rng.random((k, 2)) < keep_p[route]
    jitter = rng.standard_normal((k, 2)) * config.jitter_sigma_ps

    offset = emit_t[:, None] + jitter
    ph_node = route[survive]
    ph_index = np.broadcast_to(emitted[:, None], (k, 2))[survive]
    ph_offset = offset[survive]

    d_node, d_index, d_offset = [], [], []
    for node, rate in enumerate(config.dark_rate_per_node):
        counts = rng.poisson(rate, config.n_pulses)
        hit = np.flatnonzero(counts)
        u = rng.random(hit.size)
        # earliest of c uniform arrivals in [0, T)
        d_offset.append(T * -np.expm1(np.log1p(-u) / counts[hit]) if hit.size else u)
        d_node.append(np.full(hit.size, node, dtype=np.int64))
        d_index.append(hit)

    node = np.concatenate([ph_node] + d_node).astype(np.int64)
    base = np.concatenate([ph_index] + d_index).astype(np.int64)
    off = np.concatenate([ph_offset] + d_offset)

    shift = np.floor(off / T)
    index = base + shift.astype(np.int64)
    within = off - shift * T
    ok = (index >= 0) & (index < config.n_pulses)
    node, index, within = node[ok], index[ok], within[ok]

    order = np.lexsort((within, node * np.int64(config.n_pulses) + index))
    node, index, within = node[order], index[order], within[order]
    first = np.ones(node.size, dtype=bool)
    first[1:] = (node[1:] != node[:-1]) | (index[1:] != index[:-1])
    node, index, within = node[first], index[first], within[first]
    bins = np.clip(np.floor(within / bw).astype(np.int64), 0, nbins - 1)

    starts = np.searchsorted(node, np.arange(n + 1))
    return [NodeRecords(i, index[starts[i]:starts[i + 1]], bins[starts[i]:starts[i + 1]])
            for i in range(n)]


def write_detections_csv(path: str | Path, nodes: Sequence[NodeRecords]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "index", "bin"])
        for rec in nodes:
            for i, b in zip(rec.index.tolist(), rec.bin.tolist()):
                w.writerow([rec.node, i, b])


def read_detections_csv(path: str | Path, n_nodes: int | None = None) -> list[NodeRecords]:
    """Load externally captured time tags; rows must be ascending in index per node."""
    per_node: dict[int, tuple[list[int], list[int]]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["node", "index", "bin"]:
            raise ValueError(f"expected header node,index,bin, got {reader.fieldnames}")
        for row in reader:
            idx, bins = per_node.setdefault(int(row["node"]), ([], []))
            idx.append(int(row["index"]))
            bins.append(int(row["bin"]))
    if n_nodes is None:
        n_nodes = max(per_node, default=-1) + 1
    out = []
    for node in range(n_nodes):
        idx, bins = per_node.get(node, ([], []))
        rec = NodeRecords(node, idx, bins)
        if not rec.is_canonical():
            raise ValueError(f"node {node}: indices must be strictly ascending")
        out.append(rec)
    return out
