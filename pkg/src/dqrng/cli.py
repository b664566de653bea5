"""Command-line experiment runner.

    dqrng run --case case1 --trials 100 --out runs/case1
    dqrng run --case case2 --strategy 1=collude:1,2,3 --strategy 2=collude:1,2,3 ...
    dqrng nist bits.txt
    dqrng simulate --n-pulses 100000 --out detections.csv
    dqrng audit runs/case1/transcripts/round_00000.json

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 insufficient data.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .adversary import Strategy
from .errors import ConfigurationError
from .experiment import (EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VERIFY, Case, ExperimentConfig,
                         case1_config, case2_config, custom_config, run_experiment)
from .nist import ALPHA, TEST_NAMES, nist_subset, read_bits_file
from .protocol import SessionParams, audit
from .quantum_sim import PumpShape, SourceConfig, generate_round, write_detections_csv

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("dqrng")

_PRESETS = {Case.CASE1: case1_config, Case.CASE2: case2_config, Case.CUSTOM: custom_config}


def _strategy_arg(text: str) -> tuple[int, Strategy]:
    node, sep, kind = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected <node>=<kind>, got {text!r}")
    try:
        return int(node), Strategy.parse(kind)
    except (ValueError, ConfigurationError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _apply_section(obj, section: dict, name: str):
    section = dict(section)
    for key in ("pump_shape",):
        if isinstance(section.get(key), dict):
            section[key] = PumpShape.from_dict(section[key])
    for key in ("weights", "loss_per_node", "dark_rate_per_node"):
        if isinstance(section.get(key), list):
            section[key] = tuple(section[key])
    try:
        return replace(obj, **section)
    except TypeError as exc:
        raise ConfigurationError(f"[{name}]: {exc}") from None


def config_from_toml(path: str | Path, args: argparse.Namespace | None = None) -> ExperimentConfig:
    """Read an experiment file; command-line flags in ``args`` take precedence."""
    try:
        doc = tomllib.loads(Path(path).read_text())
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from None
    return build_config(args or argparse.Namespace(), doc)


def build_config(args: argparse.Namespace, doc: dict | None = None) -> ExperimentConfig:
    doc = doc or {}
    pick = lambda key, default=None: (getattr(args, key, None) if getattr(args, key, None)
                                      is not None else doc.get(key, default))
    try:
        case = Case(pick("case", "custom"))
    except ValueError:
        raise ConfigurationError(f"unknown case {pick('case')!r}") from None
    nodes = pick("nodes")
    kw = {"seed": int(pick("seed", 0))}
    if nodes is not None:
        kw["n"] = int(nodes)
    if pick("pump") is not None:
        kw["pump"] = pick("pump")
    if pick("trials") is not None:
        kw["trials"] = int(pick("trials"))
    base = _PRESETS[case](**kw)

    session: SessionParams = _apply_section(base.session, doc.get("session", {}), "session")
    source: SourceConfig = _apply_section(base.source, doc.get("source", {}), "source")
    if getattr(args, "n_pulses", None) is not None:
        session = replace(session, n_pulses=args.n_pulses, m=min(session.m, args.n_pulses))
        source = replace(source, n_pulses=args.n_pulses)
    if getattr(args, "car_threshold", None) is not None:
        session = replace(session, car_threshold=args.car_threshold)

    strategies = list(base.strategies)
    if len(strategies) != session.n:
        strategies = [Strategy() for _ in range(session.n)]
    for node, kind in doc.get("strategies", {}).items():
        strategies[_node(node, session.n)] = Strategy.parse(kind)
    for node, strat in getattr(args, "strategy", None) or []:
        strategies[_node(node, session.n)] = strat

    out = pick("out") or doc.get("output_dir")
    tcp = getattr(args, "tcp", None)
    if tcp is None:
        tcp = doc.get("tcp_ports")
    return ExperimentConfig(
        case, base.trials, session, source, tuple(strategies),
        output_dir=Path(out) if out else None, seed=kw["seed"], tcp_ports=tcp,
        save_transcripts=pick("save_transcripts"),
        allow_full_collusion=bool(doc.get("allow_full_collusion", False)),
    )


def _node(node, n: int) -> int:
    k = int(node)
    if not 0 <= k < n:
        raise ConfigurationError(f"strategy for unknown participant {k}")
    return k


def cmd_run(args: argparse.Namespace) -> int:
    config = config_from_toml(args.config, args) if args.config else build_config(args)
    report = run_experiment(config)
    summary = report.summary()
    print(json.dumps(summary, indent=2, default=str))
    if config.output_dir:
        print(f"artifacts written to {config.output_dir}", file=sys.stderr)
    return report.exit_code


def cmd_nist(args: argparse.Namespace) -> int:
    try:
        bits = read_bits_file(args.file)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read {args.file}: {exc}") from None
    pvalues = nist_subset(bits)
    print(f"{'test':<22}{'p-value':>12}  result   ({bits.size} bits)")
    for name in TEST_NAMES:
        p = pvalues[name]
        if p is None:
            print(f"{name:<22}{'-':>12}  skipped")
        else:
            print(f"{name:<22}{p:>12.6f}  {'pass' if p >= ALPHA else 'FAIL'}")
    ran = [p for p in pvalues.values() if p is not None]
    if not ran:
        return EXIT_DATA
    return EXIT_OK if all(p >= ALPHA for p in ran) else EXIT_VERIFY


def cmd_simulate(args: argparse.Namespace) -> int:
    source = SourceConfig(args.nodes, args.n_pulses, args.pair_rate,
                          pump_shape=PumpShape.default_for(args.pump),
                          loss_per_node=args.loss, dark_rate_per_node=args.dark_rate,
                          seed=args.seed)
    nodes = generate_round(source)
    write_detections_csv(args.out, nodes)
    for rec in nodes:
        print(f"node {rec.node}: {len(rec)} detections")
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    try:
        doc = json.loads(Path(args.transcript).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read {args.transcript}: {exc}") from None
    ok = audit(doc)
    print("transcript reproduces" if ok else "transcript does NOT reproduce")
    return EXIT_OK if ok else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dqrng", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", type=Path, help="TOML experiment file")
    run.add_argument("--case", choices=[c.value for c in Case])
    run.add_argument("--trials", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--nodes", type=int)
    run.add_argument("--n-pulses", type=int, dest="n_pulses")
    run.add_argument("--pump", choices=["uniform", "gaussian", "rayleigh"])
    run.add_argument("--car-threshold", type=float, dest="car_threshold")
    run.add_argument("--strategy", type=_strategy_arg, action="append", metavar="NODE=KIND",
                     help="honest[:guess] naive collude:1,2,3 lastrevealer:T emulator "
                          "mitm[:alter][:collude=..]")
    run.add_argument("--out", type=Path)
    run.add_argument("--tcp", type=int, nargs="*", metavar="PORT",
                     help="use localhost TCP, one port per node (none: ephemeral ports)")
    run.add_argument("--save-transcripts", action="store_const", const=True,
                     dest="save_transcripts")
    run.set_defaults(func=cmd_run)

    nist = sub.add_parser("nist", help="NIST subset on a bits file")
    nist.add_argument("file", type=Path)
    nist.set_defaults(func=cmd_nist)

    sim = sub.add_parser("simulate", help="export simulated detections as CSV")
    sim.add_argument("--nodes", type=int, default=4)
    sim.add_argument("--n-pulses", type=int, default=100_000, dest="n_pulses")
    sim.add_argument("--pair-rate", type=float, default=0.1, dest="pair_rate")
    sim.add_argument("--loss", type=float, default=0.5)
    sim.add_argument("--dark-rate", type=float, default=2e-3, dest="dark_rate")
    sim.add_argument("--pump", choices=["uniform", "gaussian", "rayleigh"], default="gaussian")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", type=Path, required=True)
    sim.set_defaults(func=cmd_simulate)

    aud = sub.add_parser("audit", help="recompute a saved transcript from its reveals")
    aud.add_argument("transcript", type=Path)
    aud.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
