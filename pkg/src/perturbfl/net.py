"""Wire protocol and transports for the synchronous round protocol.

Frame layout::

    [4-byte big-endian unsigned length N][N bytes of UTF-8 JSON]

The JSON body encodes exactly one message with keys in a fixed order.
Floats are written with Python's shortest round-trip ``repr`` so every
64-bit value survives encode/decode bit for bit. No message type has a
field for the server's secret noise.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

from .client import Client, ClientUpdate, LayerUpdate, LossStats
from .errors import FrameError, ProtocolError, RoundTimeout, SchemaError, VersionMismatch
from .perturbation import Partition, PerturbedModel

log = logging.getLogger(__name__)

PROTO_VERSION = 1
HEADER = struct.Struct(">I")
DEFAULT_MAX_FRAME = 64 * 1024 * 1024


@dataclass
class Hello:
    client_id: int
    proto_version: int = PROTO_VERSION


@dataclass
class Broadcast:
    round_id: int
    mode: str
    model: PerturbedModel


@dataclass
class Update:
    round_id: int
    update: ClientUpdate


@dataclass
class RoundDone:
    round_id: int


@dataclass
class Abort:
    round_id: int
    reason: str


Message = Union[Hello, Broadcast, Update, RoundDone, Abort]


# -- JSON mapping ---------------------------------------------------------


def _mat(a: np.ndarray) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def _model_json(pm: PerturbedModel) -> dict:
    return {
        "round_id": pm.round_id,
        "layers": [_mat(w) for w in pm.layers],
        "r_add": _mat(pm.r_add),
        "partition": [list(g) for g in pm.partition.groups],
    }


def _update_json(u: ClientUpdate) -> dict:
    return {
        "client_id": u.client_id,
        "round_id": u.round_id,
        "sample_count": u.sample_count,
        "layers": [
            {"g_hat": _mat(l.g_hat), "sigma_tilde": [_mat(s) for s in l.sigma_tilde], "beta": _mat(l.beta)}
            for l in u.layers
        ],
        "loss": {
            "perturbed": float(u.loss.perturbed),
            "group_cross": [float(v) for v in u.loss.group_cross],
            "alpha_sq": float(u.loss.alpha_sq),
        },
    }


def to_json(msg: Message) -> dict:
    if isinstance(msg, Hello):
        return {"type": "hello", "client_id": msg.client_id, "proto_version": msg.proto_version}
    if isinstance(msg, Broadcast):
        return {"type": "broadcast", "round_id": msg.round_id, "mode": msg.mode, "model": _model_json(msg.model)}
    if isinstance(msg, Update):
        return {"type": "update", "round_id": msg.round_id, "update": _update_json(msg.update)}
    if isinstance(msg, RoundDone):
        return {"type": "round_done", "round_id": msg.round_id}
    if isinstance(msg, Abort):
        return {"type": "abort", "round_id": msg.round_id, "reason": msg.reason}
    raise SchemaError(f"not a protocol message: {type(msg).__name__}")


def _keys(obj, expected: tuple[str, ...], where: str) -> dict:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    if tuple(obj) != expected:
        raise SchemaError(f"{where}: keys {list(obj)} do not match schema {list(expected)}")
    return obj


def _int(v, where: str) -> int:
    if isinstance(v, bool) or not isinstance(v, int):
        raise SchemaError(f"{where}: expected an integer")
    return v


def _num(v, where: str) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{where}: expected a number")
    return float(v)


def _array(v, ndim: int, where: str) -> np.ndarray:
    def check(x, depth):
        if depth == 0:
            _num(x, where)
            return
        if not isinstance(x, list):
            raise SchemaError(f"{where}: expected a {ndim}-D array")
        for item in x:
            check(item, depth - 1)

    check(v, ndim)
    try:
        a = np.array(v, dtype=np.float64)
    except ValueError as exc:
        raise SchemaError(f"{where}: ragged array") from exc
    if a.ndim != ndim:
        raise SchemaError(f"{where}: ragged array")
    return a


def _model_from(obj) -> PerturbedModel:
    o = _keys(obj, ("round_id", "layers", "r_add", "partition"), "model")
    if not isinstance(o["layers"], list) or not o["layers"]:
        raise SchemaError("model.layers: expected a non-empty list")
    if not isinstance(o["partition"], list):
        raise SchemaError("model.partition: expected a list")
    try:
        part = Partition(tuple(tuple(_int(i, "model.partition") for i in g) for g in o["partition"]))
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"model.partition: {exc}") from exc
    return PerturbedModel(
        layers=[_array(w, 2, "model.layers") for w in o["layers"]],
        r_add=_array(o["r_add"], 1, "model.r_add"),
        partition=part,
        round_id=_int(o["round_id"], "model.round_id"),
    )


def _update_from(obj) -> ClientUpdate:
    o = _keys(obj, ("client_id", "round_id", "sample_count", "layers", "loss"), "update")
    if not isinstance(o["layers"], list):
        raise SchemaError("update.layers: expected a list")
    layers = []
    for l in o["layers"]:
        l = _keys(l, ("g_hat", "sigma_tilde", "beta"), "update.layers[]")
        if not isinstance(l["sigma_tilde"], list):
            raise SchemaError("update.sigma_tilde: expected a list")
        layers.append(LayerUpdate(
            g_hat=_array(l["g_hat"], 2, "g_hat"),
            sigma_tilde=[_array(s, 2, "sigma_tilde") for s in l["sigma_tilde"]],
            beta=_array(l["beta"], 2, "beta"),
        ))
    loss = _keys(o["loss"], ("perturbed", "group_cross", "alpha_sq"), "update.loss")
    if not isinstance(loss["group_cross"], list):
        raise SchemaError("update.loss.group_cross: expected a list")
    count = _int(o["sample_count"], "update.sample_count")
    if count < 1:
        raise SchemaError("update.sample_count must be >= 1")
    return ClientUpdate(
        client_id=_int(o["client_id"], "update.client_id"),
        round_id=_int(o["round_id"], "update.round_id"),
        sample_count=count,
        layers=layers,
        loss=LossStats(
            perturbed=_num(loss["perturbed"], "loss.perturbed"),
            group_cross=[_num(v, "loss.group_cross") for v in loss["group_cross"]],
            alpha_sq=_num(loss["alpha_sq"], "loss.alpha_sq"),
        ),
    )


def from_json(obj) -> Message:
    if not isinstance(obj, dict) or "type" not in obj:
        raise SchemaError("message must be an object with a 'type'")
    t = obj["type"]
    if t == "hello":
        o = _keys(obj, ("type", "client_id", "proto_version"), "hello")
        msg = Hello(_int(o["client_id"], "client_id"), _int(o["proto_version"], "proto_version"))
        if msg.proto_version != PROTO_VERSION:
            raise VersionMismatch(f"client {msg.client_id} speaks protocol {msg.proto_version}, expected {PROTO_VERSION}")
        return msg
    if t == "broadcast":
        o = _keys(obj, ("type", "round_id", "mode", "model"), "broadcast")
        if o["mode"] not in ("plain", "perturbed"):
            raise SchemaError(f"broadcast.mode: unknown mode {o['mode']!r}")
        return Broadcast(_int(o["round_id"], "round_id"), o["mode"], _model_from(o["model"]))
    if t == "update":
        o = _keys(obj, ("type", "round_id", "update"), "update")
        return Update(_int(o["round_id"], "round_id"), _update_from(o["update"]))
    if t == "round_done":
        o = _keys(obj, ("type", "round_id"), "round_done")
        return RoundDone(_int(o["round_id"], "round_id"))
    if t == "abort":
        o = _keys(obj, ("type", "round_id", "reason"), "abort")
        if not isinstance(o["reason"], str):
            raise SchemaError("abort.reason: expected a string")
        return Abort(_int(o["round_id"], "round_id"), o["reason"])
    raise SchemaError(f"unknown message type {t!r}")


def encode_body(msg: Message) -> bytes:
    try:
        text = json.dumps(to_json(msg), separators=(",", ":"), allow_nan=False, ensure_ascii=False)
    except ValueError as exc:
        raise SchemaError(f"cannot encode message: {exc}") from exc
    return text.encode("utf-8")


def decode_body(body: bytes) -> Message:
    try:
        obj = json.loads(body.decode("utf-8"), parse_constant=_reject_constant)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"frame body is not valid JSON: {exc}") from exc
    return from_json(obj)


def _reject_constant(name):
    raise SchemaError(f"non-finite number {name} in frame")


def encode(msg: Message, max_frame: int = DEFAULT_MAX_FRAME) -> bytes:
    body = encode_body(msg)
    if len(body) > max_frame:
        raise FrameError(f"message of {len(body)} bytes exceeds frame limit {max_frame}")
    return HEADER.pack(len(body)) + body


def decode(data: bytes, max_frame: int = DEFAULT_MAX_FRAME) -> Message:
    """Decode exactly one complete frame."""
    if len(data) < HEADER.size:
        raise FrameError("truncated frame header")
    (n,) = HEADER.unpack_from(data)
    if n > max_frame:
        raise FrameError(f"declared length {n} exceeds frame limit {max_frame}")
    if len(data) - HEADER.size < n:
        raise FrameError(f"truncated frame: expected {n} body bytes, got {len(data) - HEADER.size}")
    if len(data) - HEADER.size > n:
        raise FrameError("trailing bytes after frame")
    return decode_body(data[HEADER.size:])


# -- socket helpers -------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            if buf:
                raise FrameError("connection closed mid-frame")
            return None
        buf.extend(chunk)
    return bytes(buf)


def read_message(sock: socket.socket, max_frame: int = DEFAULT_MAX_FRAME) -> Message | None:
    """Next message from ``sock``, or None on clean EOF at a frame boundary."""
    hdr = _recv_exact(sock, HEADER.size)
    if hdr is None:
        return None
    (n,) = HEADER.unpack(hdr)
    if n > max_frame:
        raise FrameError(f"declared length {n} exceeds frame limit {max_frame}")
    body = _recv_exact(sock, n) if n else b""
    if body is None:
        raise FrameError("connection closed mid-frame")
    return decode_body(body)


def send_message(sock: socket.socket, msg: Message, max_frame: int = DEFAULT_MAX_FRAME) -> None:
    sock.sendall(encode(msg, max_frame))


# -- transports -----------------------------------------------------------


class InProcChannel:
    """Deterministic in-process transport.

    Clients are driven synchronously in client-id order. With ``codec=True``
    every message is pushed through ``encode``/``decode`` like on the wire.
    """

    def __init__(self, clients: list[Client], codec: bool = False):
        self.clients = sorted(clients, key=lambda c: c.client_id)
        self.codec = codec
        self.inbox: queue.Queue = queue.Queue()
        self.client_ids = [c.client_id for c in self.clients]
        self.delivered: list[tuple[int, int]] = []  # (round_id, client_id) log

    def open(self) -> None:
        pass

    def _wire(self, msg):
        return decode(encode(msg)) if self.codec else msg

    def broadcast(self, msg: Broadcast) -> None:
        for c in self.clients:
            b = self._wire(msg)
            u = c.handle_broadcast(b.model, plain=b.mode == "plain")
            self.inbox.put(self._wire(Update(b.round_id, u)))

    def collect(self, round_id: int, expected: int) -> list[ClientUpdate]:
        out = []
        while len(out) < expected:
            try:
                msg = self.inbox.get_nowait()
            except queue.Empty:
                raise ProtocolError(f"round {round_id}: only {len(out)} of {expected} updates arrived") from None
            self.delivered.append((msg.round_id, msg.update.client_id))
            out.append(msg.update)
        return out

    def round_done(self, round_id: int) -> None:
        pass

    def close(self) -> None:
        pass


class TcpServerChannel:
    """Server end of the TCP transport.

    Accepts exactly ``expected_clients`` connections, each opening with a
    Hello. One reader thread per connection feeds a single queue consumed
    by the round loop.
    """

    def __init__(self, host: str, port: int, expected_clients: int, timeout_s: float = 30.0,
                 max_frame: int = DEFAULT_MAX_FRAME):
        self.expected = expected_clients
        self.timeout_s = timeout_s
        self.max_frame = max_frame
        self.inbox: queue.Queue = queue.Queue()
        self.conns: dict[int, socket.socket] = {}
        self._threads: list[threading.Thread] = []
        self._listener = socket.create_server((host, port))
        self._listener.settimeout(timeout_s)
        self.address = self._listener.getsockname()[:2]

    def open(self) -> None:
        deadline = time.monotonic() + self.timeout_s
        while len(self.conns) < self.expected:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                self.close()
                raise RoundTimeout(f"only {len(self.conns)} of {self.expected} clients joined within {self.timeout_s}s")
            self._listener.settimeout(remaining)
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            conn.settimeout(remaining)
            try:
                hello = read_message(conn, self.max_frame)
            except VersionMismatch as exc:
                self._abort(conn, -1, str(exc))
                self.close()
                raise
            except (ProtocolError, OSError) as exc:
                conn.close()
                log.warning("dropping connection with bad handshake: %s", exc)
                continue
            if not isinstance(hello, Hello) or hello.client_id in self.conns:
                self._abort(conn, -1, "expected a Hello with a fresh client id")
                continue
            conn.settimeout(None)
            self.conns[hello.client_id] = conn
            log.info("client %d joined", hello.client_id)
        for cid, conn in self.conns.items():
            t = threading.Thread(target=self._reader, args=(cid, conn), daemon=True)
            t.start()
            self._threads.append(t)

    def _reader(self, cid: int, conn: socket.socket) -> None:
        while True:
            try:
                msg = read_message(conn, self.max_frame)
            except (ProtocolError, OSError) as exc:
                self.inbox.put((cid, exc))
                return
            self.inbox.put((cid, msg))
            if msg is None:
                return

    def _abort(self, conn: socket.socket, round_id: int, reason: str) -> None:
        try:
            send_message(conn, Abort(round_id, reason), self.max_frame)
        except OSError:
            pass
        conn.close()

    def abort_all(self, round_id: int, reason: str) -> None:
        for conn in self.conns.values():
            self._abort(conn, round_id, reason)
        self.conns.clear()

    def broadcast(self, msg: Broadcast) -> None:
        frame = encode(msg, self.max_frame)
        for cid in sorted(self.conns):
            try:
                self.conns[cid].sendall(frame)
            except OSError as exc:
                self.abort_all(msg.round_id, f"client {cid} unreachable")
                raise ProtocolError(f"round {msg.round_id}: send to client {cid} failed: {exc}") from exc

    def collect(self, round_id: int, expected: int) -> list[ClientUpdate]:
        got: dict[int, ClientUpdate] = {}
        deadline = time.monotonic() + self.timeout_s
        while len(got) < expected:
            remaining = deadline - time.monotonic()
            try:
                if remaining <= 0:
                    raise queue.Empty
                cid, msg = self.inbox.get(timeout=remaining)
            except queue.Empty:
                self.abort_all(round_id, "round timed out")
                raise RoundTimeout(f"round {round_id}: {len(got)} of {expected} updates before timeout") from None
            if msg is None or isinstance(msg, Exception):
                self.abort_all(round_id, f"client {cid} disconnected")
                raise ProtocolError(f"round {round_id}: client {cid} disconnected ({msg})")
            if isinstance(msg, Abort):
                self.abort_all(round_id, f"client {cid} aborted")
                raise ProtocolError(f"round {round_id}: client {cid} aborted: {msg.reason}")
            if not isinstance(msg, Update) or msg.round_id != round_id or msg.update.client_id != cid:
                self.abort_all(round_id, "unexpected message")
                raise ProtocolError(f"round {round_id}: unexpected message from client {cid}")
            got[cid] = msg.update
        return [got[c] for c in sorted(got)]

    def round_done(self, round_id: int) -> None:
        frame = encode(RoundDone(round_id), self.max_frame)
        for conn in self.conns.values():
            try:
                conn.sendall(frame)
            except OSError:
                pass

    def close(self) -> None:
        for conn in self.conns.values():
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self.conns.clear()
        self._listener.close()
        for t in self._threads:
            t.join(timeout=5)


def run_tcp_client(host: str, port: int, client: Client, *, timeout_s: float = 30.0,
                   proto_version: int = PROTO_VERSION, max_frame: int = DEFAULT_MAX_FRAME,
                   on_update: Callable[[ClientUpdate], None] | None = None) -> int:
    """Client end: handshake, then alternate broadcast -> update until the server hangs up.

    Returns the number of rounds served. Raises ProtocolError on Abort or a
    mid-round disconnect.
    """
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(deadline - time.monotonic(), 0.1))
            break
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise RoundTimeout(f"could not reach server at {host}:{port}: {exc}") from exc
            time.sleep(0.05)
    rounds = 0
    in_round = False
    try:
        sock.settimeout(None)
        send_message(sock, Hello(client.client_id, proto_version), max_frame)
        while True:
            msg = read_message(sock, max_frame)
            if msg is None:
                if in_round:
                    raise ProtocolError("server closed the connection mid-round")
                return rounds
            if isinstance(msg, Abort):
                raise ProtocolError(f"server aborted round {msg.round_id}: {msg.reason}")
            if isinstance(msg, Broadcast):
                in_round = True
                u = client.handle_broadcast(msg.model, plain=msg.mode == "plain")
                if on_update is not None:
                    on_update(u)
                send_message(sock, Update(msg.round_id, u), max_frame)
            elif isinstance(msg, RoundDone):
                in_round = False
                rounds += 1
            else:
                raise ProtocolError(f"unexpected {type(msg).__name__} from server")
    except OSError as exc:
        raise ProtocolError(f"connection lost: {exc}") from exc
    finally:
        sock.close()


def run_transport(role: str, endpoint, handler=None, **kw):
    """Open a transport session.

    ``role="server"``: ``endpoint`` is a list of in-proc clients or a
    ``(host, port)`` pair; returns an opened channel. ``role="client"``:
    ``endpoint`` is ``(host, port)`` and ``handler`` the :class:`Client`;
    runs to completion and returns the number of rounds served.
    """
    if role == "server":
        if isinstance(endpoint, list):
            ch = InProcChannel(endpoint, codec=kw.get("codec", False))
        else:
            host, port = endpoint
            ch = TcpServerChannel(host, port, kw["expected_clients"], kw.get("timeout_s", 30.0),
                                  kw.get("max_frame", DEFAULT_MAX_FRAME))
        ch.open()
        return ch
    if role == "client":
        host, port = endpoint
        return run_tcp_client(host, port, handler, **kw)
    raise ValueError(f"unknown role {role!r}")
