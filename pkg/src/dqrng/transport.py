"""Broadcast bus for the public reveals.

Wire frame: 4-byte big-endian body length, then canonical JSON
``{"type":..,"sender":..,"seq":..,"payload":{..}}``.  Quantum reveals carry
their indices delta-encoded (first index, then gaps).

Delivery order on every bus is ``(phase of message type, sender, seq)``:
messages are buffered until :meth:`flush` and then handed to each receiver
sorted, so the order in which participants happened to submit never reaches
the engine.  Nothing is authenticated or encrypted.
"""
from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable

import numpy as np

from .canonical import canonical_bytes, int_array, parse_int
from .errors import EnvelopeError, FramingError
from .protocol import ClassicalReveal
from .quantum_sim import NodeRecords

log = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024
_HEADER = struct.Struct("!I")


class MsgType(str, Enum):
    HELLO = "HELLO"
    REVEAL_C = "REVEAL_C"
    REVEAL_Q = "REVEAL_Q"
    VERDICT = "VERDICT"
    OUTPUT = "OUTPUT"

    @property
    def rank(self) -> int:
        return _RANK[self]


_RANK = {t: i for i, t in enumerate(MsgType)}

_REQUIRED = {
    MsgType.HELLO: ("participant", "n"),
    MsgType.REVEAL_C: ("participant", "values", "weight"),
    MsgType.REVEAL_Q: ("participant", "first", "gaps", "bins"),
    MsgType.VERDICT: ("participant", "verdicts_sha256", "passed"),
    MsgType.OUTPUT: ("participant", "output", "transcript_sha256"),
}


def _check_schema(msg_type: MsgType, body: Any) -> None:
    if not isinstance(body, dict):
        raise EnvelopeError(f"{msg_type.value} payload must be an object")
    missing = [k for k in _REQUIRED[msg_type] if k not in body]
    if missing:
        raise EnvelopeError(f"{msg_type.value} payload missing {missing}")
    try:
        parse_int(body["participant"])
        if msg_type is MsgType.REVEAL_Q:
            if len(body["gaps"]) + (body["first"] is not None) != len(body["bins"]):
                raise EnvelopeError("REVEAL_Q gaps/bins length mismatch")
        if msg_type is MsgType.REVEAL_C and not isinstance(body["values"], (list, np.ndarray)):
            raise EnvelopeError("REVEAL_C values must be a list")
    except (TypeError, ValueError) as exc:
        raise EnvelopeError(f"bad {msg_type.value} payload: {exc}") from exc


class Envelope:
    """One broadcast message.

    Built either from a payload object (loopback, serialised only when a
    frame is needed) or from received payload bytes.
    """

    __slots__ = ("msg_type", "sender", "seq", "_body", "_payload")

    def __init__(self, msg_type: MsgType, sender: int, seq: int, body: Any = None,
                 payload: bytes | None = None):
        self.msg_type = MsgType(msg_type)
        self.sender = int(sender)
        self.seq = int(seq)
        if body is None and payload is None:
            raise EnvelopeError("envelope needs a body or payload bytes")
        self._body = body
        self._payload = payload

    @property
    def payload(self) -> bytes:
        if self._payload is None:
            self._payload = canonical_bytes(self._body)
        return self._payload

    @property
    def body(self) -> Any:
        if self._body is None:
            try:
                self._body = json.loads(self._payload)
            except (ValueError, UnicodeDecodeError) as exc:
                raise EnvelopeError(f"payload is not JSON: {exc}") from exc
        return self._body

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.msg_type.rank, self.sender, self.seq)

    def validate(self) -> None:
        _check_schema(self.msg_type, self.body)
        if parse_int(self.body["participant"]) != self.sender:
            raise EnvelopeError("payload participant differs from envelope sender")

    def __repr__(self) -> str:
        return f"Envelope({self.msg_type.value}, sender={self.sender}, seq={self.seq})"


# -- payload helpers ---------------------------------------------------------


def hello_body(participant: int, n: int) -> dict:
    return {"participant": participant, "n": n}


def reveal_c_body(reveal: ClassicalReveal) -> dict:
    return {"participant": reveal.participant, "values": reveal.values, "weight": reveal.weight}


def parse_reveal_c(body: dict) -> ClassicalReveal:
    return ClassicalReveal.from_dict(body)


def reveal_q_body(rec: NodeRecords) -> dict:
    idx = rec.index
    return {
        "participant": rec.node,
        "first": int(idx[0]) if idx.size else None,
        "gaps": np.diff(idx),
        "bins": rec.bin,
    }


def parse_reveal_q(body: dict) -> NodeRecords:
    pid = parse_int(body["participant"])
    if body["first"] is None:
        return NodeRecords.empty(pid)
    gaps = int_array(body["gaps"])
    index = np.concatenate([[parse_int(body["first"])], gaps]).cumsum()
    return NodeRecords(pid, index, int_array(body["bins"]))


# -- framing -----------------------------------------------------------------


def encode(env: Envelope) -> bytes:
    head = canonical_bytes({"type": env.msg_type.value, "sender": env.sender, "seq": env.seq})
    body = head[:-1] + b',"payload":' + env.payload + b"}"
    if len(body) > MAX_FRAME:
        raise FramingError(f"frame of {len(body)} bytes exceeds {MAX_FRAME}")
    return _HEADER.pack(len(body)) + body


def _parse_body(body: bytes) -> Envelope:
    try:
        doc = json.loads(body)
        env = Envelope(MsgType(doc["type"]), parse_int(doc["sender"]), parse_int(doc["seq"]),
                       payload=canonical_bytes(doc["payload"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise EnvelopeError(f"unparseable frame body: {exc}") from exc
    env.validate()
    return env


def decode(frame: bytes) -> Envelope:
    if len(frame) < _HEADER.size:
        raise FramingError("truncated frame header")
    (length,) = _HEADER.unpack_from(frame)
    if length == 0:
        raise FramingError("zero-length frame")
    if length > MAX_FRAME:
        raise FramingError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    if len(frame) - _HEADER.size != length:
        raise FramingError(f"frame length {length} but {len(frame) - _HEADER.size} bytes present")
    return _parse_body(frame[_HEADER.size:])


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            return None if not buf else bytes(buf)
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Envelope | None:
    """Next envelope from a stream socket, or None on clean EOF."""
    head = _recv_exact(sock, _HEADER.size)
    if head is None:
        return None
    if len(head) < _HEADER.size:
        raise FramingError("connection closed inside a frame header")
    (length,) = _HEADER.unpack(head)
    if length == 0 or length > MAX_FRAME:
        raise FramingError(f"bad frame length {length}")
    body = _recv_exact(sock, length)
    if body is None or len(body) < length:
        raise FramingError("connection closed inside a frame")
    return _parse_body(body)


# -- buses -------------------------------------------------------------------


@dataclass(frozen=True)
class DeliveryReceipt:
    msg_type: MsgType
    sender: int
    seq: int


Receiver = Callable[[Envelope], None]


class LoopbackBus:
    """In-memory broadcast to every subscribed participant, sender included."""

    def __init__(self, n: int):
        self.n = n
        self._receivers: dict[int, Receiver] = {}
        self._pending: list[Envelope] = []
        self._seen: set[tuple[int, int]] = set()
        self._lock = threading.Lock()
        self.delivered: list[Envelope] = []

    def subscribe(self, participant: int, receiver: Receiver) -> None:
        self._receivers[participant] = receiver

    def reset(self) -> None:
        """Forget sequence numbers and history before a new round."""
        with self._lock:
            self._pending.clear()
            self._seen.clear()
            self.delivered = []

    def _admit(self, env: Envelope) -> DeliveryReceipt:
        env.validate()
        if not 0 <= env.sender < self.n:
            raise EnvelopeError(f"unknown sender {env.sender}")
        key = (env.sender, env.seq)
        with self._lock:
            if key in self._seen:
                raise EnvelopeError(f"duplicate envelope sender={env.sender} seq={env.seq}")
            self._seen.add(key)
            self._pending.append(env)
        return DeliveryReceipt(env.msg_type, env.sender, env.seq)

    def broadcast(self, env: Envelope) -> DeliveryReceipt:
        return self._admit(env)

    def pending(self) -> list[Envelope]:
        """Messages broadcast but not yet flushed; any observer can read these."""
        with self._lock:
            return sorted(self._pending, key=lambda e: e.key)

    def _collect(self) -> dict[int, list[Envelope]]:
        with self._lock:
            batch = sorted(self._pending, key=lambda e: e.key)
            self._pending.clear()
        return {pid: batch for pid in self._receivers}

    def flush(self) -> list[Envelope]:
        """Deliver everything pending, in canonical order, to every receiver."""
        per_receiver = self._collect()
        order: list[Envelope] = []
        for pid in sorted(per_receiver):
            batch = per_receiver[pid]
            for env in batch:
                self._receivers[pid](env)
            order = batch
        self.delivered.extend(order)
        return order

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class TcpBus(LoopbackBus):
    """Full mesh of TCP connections on localhost, one listener per participant.

    Every broadcast is framed and written to every participant's listener
    (the sender's own included); :meth:`flush` waits until each listener has
    read all frames sent so far, then delivers each participant's inbox in
    canonical order.  ``pending()`` shows frames already on the wire, which
    is what a participant watching its own inbox would see.
    """

    def __init__(self, n: int, ports: list[int] | None = None, host: str = "127.0.0.1",
                 timeout: float = 60.0):
        super().__init__(n)
        if ports is not None and len(ports) != n:
            raise ValueError(f"need {n} ports, got {len(ports)}")
        self.host = host
        self.timeout = timeout
        self._inbox: list[queue.Queue] = [queue.Queue() for _ in range(n)]
        self._errors: list[BaseException] = []
        self._sent = 0
        self._threads: list[threading.Thread] = []
        self._listeners: list[socket.socket] = []
        for pid in range(n):
            srv = socket.create_server((host, ports[pid] if ports else 0))
            self._listeners.append(srv)
            t = threading.Thread(target=self._serve, args=(pid, srv), daemon=True)
            t.start()
            self._threads.append(t)
        self.ports = [s.getsockname()[1] for s in self._listeners]
        self._conns = [[socket.create_connection((host, p), timeout=timeout) for p in self.ports]
                       for _ in range(n)]
        self._send_locks = [threading.Lock() for _ in range(n)]

    def _serve(self, pid: int, srv: socket.socket) -> None:
        accepted = []
        try:
            for _ in range(self.n):
                conn, _ = srv.accept()
                accepted.append(conn)
                t = threading.Thread(target=self._read_loop, args=(pid, conn), daemon=True)
                t.start()
                self._threads.append(t)
        except OSError:
            pass

    def _read_loop(self, pid: int, conn: socket.socket) -> None:
        try:
            while True:
                env = read_frame(conn)
                if env is None:
                    break
                self._inbox[pid].put(env)
        except (OSError, FramingError, EnvelopeError) as exc:
            self._errors.append(exc)
        finally:
            conn.close()

    def broadcast(self, env: Envelope) -> DeliveryReceipt:
        receipt = self._admit(env)
        frame = encode(env)
        with self._send_locks[env.sender]:
            for conn in self._conns[env.sender]:
                conn.sendall(frame)
        with self._lock:
            self._sent += 1
        return receipt

    def _collect(self) -> dict[int, list[Envelope]]:
        # local copies only serve pending(); delivery uses what came off the wire
        with self._lock:
            expected, self._sent = self._sent, 0
            self._pending.clear()
        out = {}
        for pid in range(self.n):
            got = []
            for _ in range(expected):
                try:
                    got.append(self._inbox[pid].get(timeout=self.timeout))
                except queue.Empty:
                    raise FramingError(f"participant {pid} missed frames ({self._errors})") from None
            out[pid] = sorted(got, key=lambda e: e.key)
        return {pid: out[pid] for pid in self._receivers}

    def close(self) -> None:
        for row in getattr(self, "_conns", []):
            for c in row:
                try:
                    c.close()
                except OSError:
                    pass
        for s in self._listeners:
            s.close()
