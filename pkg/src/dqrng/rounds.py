"""Drive one full round: simulated source, participants, bus and public ledger."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .adversary import (RoundView, Strategy, act_classical, act_quantum, declare_prediction,
                        plan_coalition)
from .canonical import canonical_bytes, sha256_hex
from .errors import (ConfigurationError, EmptySelection, InsufficientEntropy, ProtocolError,
                     VerificationFailed)
from .protocol import Phase, RoundTranscript, Session, SessionParams
from .quantum_sim import SourceConfig, generate_round
from .seeding import make_rng, split_seed
from .transport import (Envelope, LoopbackBus, MsgType, hello_body, parse_reveal_c,
                        parse_reveal_q, reveal_c_body, reveal_q_body)
from .verify import CoincidenceHistogram

log = logging.getLogger(__name__)

OK, REJECTED, EMPTY, INSUFFICIENT = "ok", "rejected", "empty", "insufficient"


@dataclass
class RoundResult:
    seed: int
    status: str
    output: list[int] | None
    transcript: RoundTranscript
    predictions: dict[int, int]
    rejected_messages: list[str] = field(default_factory=list)
    histograms: dict[tuple[int, int], CoincidenceHistogram] = field(default_factory=dict)
    _sha: str | None = None

    @property
    def passed(self) -> bool:
        return self.status == OK

    @property
    def sha256(self) -> str:
        if self._sha is None:
            self._sha = self.transcript.sha256()
        return self._sha


def check_compatible(params: SessionParams, source: SourceConfig, strategies) -> None:
    if not params.n == source.n_nodes == len(strategies):
        raise ConfigurationError(
            f"participant counts differ: session {params.n}, source {source.n_nodes}, "
            f"strategies {len(strategies)}")
    if params.n_pulses != source.n_pulses:
        raise ConfigurationError("session and source must share n_pulses")
    if (params.period_ps, params.bin_width_ps) != (source.period_ps, source.bin_width_ps):
        raise ConfigurationError("session and source disagree on period or bin width")


class _Ledger:
    """Participant 0's copy of the public record, fed by its bus deliveries.

    Every participant receives the same ordered stream, so one replica is
    enough to compute the public values; the others only log what they saw.
    """

    def __init__(self, params: SessionParams):
        self.session = Session(params)
        self.rejected: list[str] = []
        self.seen: dict[int, list[tuple]] = {}

    def receiver(self, pid: int):
        log_ = self.seen.setdefault(pid, [])

        def deliver(env: Envelope) -> None:
            log_.append(env.key)
            if pid == 0:
                self._apply(env)
        return deliver

    def _apply(self, env: Envelope) -> None:
        try:
            if env.msg_type is MsgType.REVEAL_C:
                self.session.submit_classical(parse_reveal_c(env.body))
            elif env.msg_type is MsgType.REVEAL_Q:
                self.session.submit_quantum(env.sender, parse_reveal_q(env.body))
        except ProtocolError as exc:
            self.rejected.append(f"{env!r}: {exc}")


def run_round(params: SessionParams, source: SourceConfig, strategies, seed: int,
              bus: LoopbackBus | None = None) -> RoundResult:
    """Play one round with every participant acting through ``bus``.

    Dishonest participants that act late read the bus's pending messages of
    the current phase before publishing their own.
    """
    strategies = [s if isinstance(s, Strategy) else Strategy.parse(s) for s in strategies]
    check_compatible(params, source, strategies)
    n = params.n
    bus = bus if bus is not None else LoopbackBus(n)
    bus.reset()
    ledger = _Ledger(params)
    for pid in range(n):
        bus.subscribe(pid, ledger.receiver(pid))

    true = generate_round(replace(source, seed=split_seed(seed, "source")))
    coalition = sorted({m for s in strategies if s.in_coalition for m in s.members})
    plan = None
    if coalition:
        frac = next(s.fabricated_fraction for s in strategies if s.in_coalition)
        plan = plan_coalition(params, coalition, split_seed(seed, "coalition"), frac)
    views = [RoundView(pid, params, make_rng(seed, "participant", pid),
                       plan=plan if strategies[pid].in_coalition else None)
             for pid in range(n)]
    seq = [0] * n

    def send(pid: int, kind: MsgType, body) -> None:
        bus.broadcast(Envelope(kind, pid, seq[pid], body))
        seq[pid] += 1

    for pid in range(n):
        send(pid, MsgType.HELLO, hello_body(pid, n))
    bus.flush()

    # predictions are fixed before anyone reveals
    predictions = {}
    for pid in range(n):
        guess = declare_prediction(strategies[pid], views[pid])
        if guess is not None:
            predictions[pid] = guess

    order = sorted(range(n), key=lambda p: strategies[p].late_classical)
    for pid in order:
        if strategies[pid].late_classical:
            views[pid].classical = {e.sender: parse_reveal_c(e.body) for e in bus.pending()
                                    if e.msg_type is MsgType.REVEAL_C}
        send(pid, MsgType.REVEAL_C, reveal_c_body(act_classical(strategies[pid], views[pid])))
    bus.flush()

    order = sorted(range(n), key=lambda p: strategies[p].late_quantum)
    for pid in order:
        if strategies[pid].late_quantum:
            views[pid].quantum = {e.sender: parse_reveal_q(e.body) for e in bus.pending()
                                  if e.msg_type is MsgType.REVEAL_Q}
        rec = act_quantum(strategies[pid], views[pid], true[pid])
        send(pid, MsgType.REVEAL_Q, reveal_q_body(rec))
    bus.flush()

    session = ledger.session
    if session.phase is not Phase.VERIFY:
        raise ProtocolError(f"reveals incomplete, ledger in {session.phase.value}: "
                            f"{ledger.rejected}")
    verdicts = session.verify()
    vhash = sha256_hex(canonical_bytes([v.to_dict() for v in verdicts]))
    for pid in range(n):
        send(pid, MsgType.VERDICT, {"participant": pid, "verdicts_sha256": vhash,
                                    "passed": session.verified})
    bus.flush()

    status = OK
    try:
        session.consensus2()
        session.compute_output()
    except VerificationFailed as exc:
        status = REJECTED
        log.info("round %d rejected: %s", seed, exc)
    except EmptySelection:
        status = EMPTY
    except InsufficientEntropy:
        status = INSUFFICIENT

    transcript = session.transcript()
    result = RoundResult(seed, status, transcript.output, transcript, predictions,
                         ledger.rejected, dict(session.histograms))
    for pid in range(n):
        send(pid, MsgType.OUTPUT, {"participant": pid, "output": transcript.output,
                                   "transcript_sha256": result.sha256})
    bus.flush()

    views_agree = all(ledger.seen[p] == ledger.seen[0] for p in range(n))
    if not views_agree:
        raise ProtocolError("participants observed different delivery orders")
    return result


def honest(n: int) -> list[Strategy]:
    return [Strategy() for _ in range(n)]


def first_outputs(results) -> np.ndarray:
    return np.array([r.output[0] for r in results if r.output])
