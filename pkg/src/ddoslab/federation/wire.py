"""TCP transport for federated rounds.

Every frame is ``>I`` payload length, one message-type byte, then the payload.
JOIN/ACCEPT/ERROR carry UTF-8 JSON; weights travel in the netcore binary container.
"""
from __future__ import annotations

import json
import logging
import socket
import struct
import time
from enum import IntEnum

from .. import ganomaly as gan
from .. import netcore as nc
from .core import (Client, ClientUpdate, FederationError, FederationResult, FLConfig,
                   aggregate_round, initial_weights)

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 256 * 1024 * 1024
HEADER = struct.Struct(">IB")


class MsgType(IntEnum):
    JOIN = 0x01
    ACCEPT = 0x02
    GLOBAL_WEIGHTS = 0x03
    CLIENT_UPDATE = 0x04
    DONE = 0x05
    ERROR = 0x06


class ErrorCode(IntEnum):
    VERSION_MISMATCH = 1
    ARCH_MISMATCH = 2
    MALFORMED = 3
    DUPLICATE_CLIENT = 4
    UNEXPECTED = 5


class ProtocolError(ConnectionError):
    pass


class RemoteError(ConnectionError):
    def __init__(self, code: int, message: str):
        super().__init__(f"remote error {code}: {message}")
        self.code = code


def encode_frame(mtype: int, payload: bytes = b"") -> bytes:
    if len(payload) > MAX_FRAME:
        raise ProtocolError(f"frame of {len(payload)} bytes exceeds {MAX_FRAME}")
    return HEADER.pack(len(payload), int(mtype)) + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks, got = [], 0
    while got < n:
        chunk = sock.recv(min(n - got, 1 << 20))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[MsgType, bytes]:
    length, mtype = HEADER.unpack(_recv_exact(sock, HEADER.size))
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds {MAX_FRAME}")
    try:
        kind = MsgType(mtype)
    except ValueError:
        raise ProtocolError(f"unknown message type 0x{mtype:02x}") from None
    return kind, _recv_exact(sock, length)


def send_frame(sock: socket.socket, mtype: int, payload: bytes = b"") -> None:
    sock.sendall(encode_frame(mtype, payload))


def error_payload(code: int, message: str) -> bytes:
    return struct.pack(">H", int(code)) + message.encode()


def parse_error(payload: bytes) -> RemoteError:
    (code,) = struct.unpack_from(">H", payload)
    return RemoteError(code, payload[2:].decode(errors="replace"))


def weights_payload(round_no: int, weights: nc.ModelWeights) -> bytes:
    return struct.pack(">I", round_no) + weights.to_bytes()


def parse_weights_payload(payload: bytes) -> tuple[int, nc.ModelWeights]:
    (round_no,) = struct.unpack_from(">I", payload)
    return round_no, nc.ModelWeights.from_bytes(payload[4:])


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


class FederationServer:
    """Accepts ``expected_clients`` JOINs, then drives ``cfg.rounds`` FedAvg rounds.

    A client that errors, disconnects or misses the round deadline is dropped for
    the rest of the run; the event is logged and kept in ``self.events``.
    """

    def __init__(self, cfg: FLConfig, arch: gan.GanomalyArch, train_config: gan.TrainConfig,
                 expected_clients: int, bind: tuple[str, int] = ("127.0.0.1", 0),
                 join_timeout: float = 60.0):
        self.cfg = cfg
        self.arch = arch
        self.train_config = train_config
        self.expected = expected_clients
        self.join_timeout = join_timeout
        self.sock = socket.create_server(bind)
        self.address = self.sock.getsockname()[:2]
        self.clients: dict[str, socket.socket] = {}
        self.events: list[dict] = []

    def _event(self, kind: str, **info) -> None:
        info["event"] = kind
        self.events.append(info)
        log.warning("federation server: %s %s", kind, info)

    def _handshake(self, conn: socket.socket) -> None:
        conn.settimeout(self.join_timeout)
        try:
            kind, payload = read_frame(conn)
            if kind != MsgType.JOIN:
                raise ProtocolError(f"expected JOIN, got {kind.name}")
            hello = json.loads(payload)
        except (ProtocolError, ValueError, ConnectionError, OSError) as exc:
            self._event("rejected", reason=f"malformed join: {exc}")
            _try_send(conn, MsgType.ERROR, error_payload(ErrorCode.MALFORMED, str(exc)))
            conn.close()
            return
        cid = str(hello.get("client_id", ""))
        if hello.get("version") != PROTOCOL_VERSION:
            self._reject(conn, cid, ErrorCode.VERSION_MISMATCH,
                         f"protocol version {hello.get('version')} != {PROTOCOL_VERSION}")
        elif hello.get("arch_sha256") != self.arch.sha256():
            self._reject(conn, cid, ErrorCode.ARCH_MISMATCH, "architecture hash mismatch")
        elif not cid or cid in self.clients:
            self._reject(conn, cid, ErrorCode.DUPLICATE_CLIENT, f"client id {cid!r} unavailable")
        else:
            plan = {"client_id": cid, "rounds": self.cfg.rounds,
                    "local_epochs": self.cfg.local_epochs, "seed": self.cfg.seed,
                    "weighting": self.cfg.weighting}
            send_frame(conn, MsgType.ACCEPT, json.dumps(plan).encode())
            self.clients[cid] = conn
            log.info("federation server: %s joined", cid)

    def _reject(self, conn, cid, code, message) -> None:
        self._event("rejected", client_id=cid, reason=message)
        _try_send(conn, MsgType.ERROR, error_payload(code, message))
        conn.close()

    def accept_clients(self) -> None:
        deadline = time.monotonic() + self.join_timeout
        while len(self.clients) < self.expected:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            self.sock.settimeout(remaining)
            try:
                conn, _ = self.sock.accept()
            except socket.timeout:
                break
            self._handshake(conn)
        if not self.clients:
            raise FederationError("no client joined before the timeout")

    def _drop(self, cid: str, reason: str, round_no: int) -> None:
        self._event("client_dropped", client_id=cid, round=round_no, reason=reason)
        conn = self.clients.pop(cid, None)
        if conn is not None:
            conn.close()

    def run(self) -> FederationResult:
        self.accept_clients()
        weights = initial_weights(self.arch, self.train_config, self.cfg.seed)
        logs = []
        for r in range(1, self.cfg.rounds + 1):
            failed = {}
            for cid in sorted(self.clients):
                try:
                    send_frame(self.clients[cid], MsgType.GLOBAL_WEIGHTS, weights_payload(r, weights))
                except OSError as exc:
                    failed[cid] = repr(exc)
                    self._drop(cid, f"send failed: {exc}", r)
            updates = []
            deadline = time.monotonic() + self.cfg.round_timeout
            for cid in sorted(self.clients):
                conn = self.clients[cid]
                try:
                    conn.settimeout(max(deadline - time.monotonic(), 1e-3))
                    kind, payload = read_frame(conn)
                    if kind == MsgType.ERROR:
                        raise parse_error(payload)
                    if kind != MsgType.CLIENT_UPDATE:
                        raise ProtocolError(f"expected CLIENT_UPDATE, got {kind.name}")
                    up = ClientUpdate.from_bytes(payload)
                    if up.round != r or up.client_id != cid:
                        raise ProtocolError(f"update for round {up.round} from {up.client_id!r}")
                    updates.append(up)
                except (OSError, ValueError, struct.error) as exc:
                    failed[cid] = repr(exc)
                    self._drop(cid, str(exc) or type(exc).__name__, r)
            weights, rl = aggregate_round(updates, failed, self.cfg, r)
            logs.append(rl)
        final = weights.to_bytes()
        for cid in sorted(self.clients):
            _try_send(self.clients[cid], MsgType.DONE, final)
            self.clients[cid].close()
        self.clients.clear()
        return FederationResult(weights, logs)

    def close(self) -> None:
        for conn in self.clients.values():
            conn.close()
        self.sock.close()


def _try_send(conn: socket.socket, mtype: int, payload: bytes) -> None:
    try:
        send_frame(conn, mtype, payload)
    except OSError:
        pass


def serve(bind: str, cfg: FLConfig, arch: gan.GanomalyArch, train_config: gan.TrainConfig,
          expected_clients: int, join_timeout: float = 60.0) -> FederationResult:
    server = FederationServer(cfg, arch, train_config, expected_clients, parse_address(bind),
                              join_timeout)
    try:
        return server.run()
    finally:
        server.close()


def connect(server: str | tuple[str, int], client: Client, timeout: float = 600.0
            ) -> nc.ModelWeights:
    """Join a federation, train every round on local data, return the final global weights."""
    addr = parse_address(server) if isinstance(server, str) else server
    with socket.create_connection(addr, timeout=timeout) as sock:
        hello = {"client_id": client.client_id, "version": PROTOCOL_VERSION,
                 "arch_sha256": client.model.arch.sha256()}
        send_frame(sock, MsgType.JOIN, json.dumps(hello).encode())
        kind, payload = read_frame(sock)
        if kind == MsgType.ERROR:
            raise parse_error(payload)
        if kind != MsgType.ACCEPT:
            raise ProtocolError(f"expected ACCEPT, got {kind.name}")
        plan = json.loads(payload)
        while True:
            kind, payload = read_frame(sock)
            if kind == MsgType.GLOBAL_WEIGHTS:
                round_no, weights = parse_weights_payload(payload)
                update = client.local_train(weights, round_no, plan["local_epochs"], plan["seed"])
                send_frame(sock, MsgType.CLIENT_UPDATE, update.to_bytes())
            elif kind == MsgType.DONE:
                final = nc.ModelWeights.from_bytes(payload)
                client.model.set_weights(final)
                return final
            elif kind == MsgType.ERROR:
                raise parse_error(payload)
            else:
                raise ProtocolError(f"unexpected {kind.name} from server")
