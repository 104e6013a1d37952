"""Reliable ordered transports with byte counters and injected latency.

Latency is simulated, not slept: every delivered frame advances a
virtual clock by the configured per-message one-way latency. The
protocols here are strict request/response chains, so the accumulated
total equals the latency on the critical path, and a run's reported
wall time is measured compute time plus the virtual latency accrued in
its window. Sleeping for real would make a multi-interactive run over
a large batch take hours without changing any measured ratio.

The in-process transport moves frames over queues; the socket
transport moves the same frames over localhost TCP. Both count the
exact framed bytes, so their counters agree bit for bit.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

from . import wire

DEFAULT_TIMEOUT_S = 30.0

PHASE_SETUP = "setup"
PHASE_PROTOCOL = "protocol"
PHASE_TEARDOWN = "teardown"


class TransportError(RuntimeError):
    pass


class ProtocolTimeout(TransportError):
    """No frame arrived within the receive timeout."""


@dataclass(frozen=True)
class MessageRecord:
    index: int
    sender: str
    receiver: str
    variant: str
    n_bytes: int
    sim_time_ms: float
    phase: str


@dataclass
class DirectionCounter:
    messages: int = 0
    bytes: int = 0


class Transport:
    """Shared counting/trace logic; subclasses implement delivery."""

    def __init__(self, party_names, latency_ms: float = 10.0, keep_frames: bool = False):
        self.party_names = list(party_names)
        self.latency_ms = float(latency_ms)
        self.keep_frames = keep_frames
        self.records: list[MessageRecord] = []
        self.frames: list[bytes] = []
        self.counters: dict[tuple[str, str], DirectionCounter] = {}
        self.simulated_ms = 0.0
        self.phase = PHASE_SETUP
        self._lock = threading.Lock()

    def set_phase(self, phase: str) -> None:
        with self._lock:
            self.phase = phase

    def _record(self, sender: str, receiver: str, frame: bytes) -> None:
        with self._lock:
            self.simulated_ms += self.latency_ms
            counter = self.counters.setdefault((sender, receiver), DirectionCounter())
            counter.messages += 1
            counter.bytes += len(frame)
            self.records.append(MessageRecord(
                index=len(self.records),
                sender=sender,
                receiver=receiver,
                variant=wire.TAG_NAMES.get(wire.frame_tag(frame), "?"),
                n_bytes=len(frame),
                sim_time_ms=self.simulated_ms,
                phase=self.phase,
            ))
            if self.keep_frames:
                self.frames.append(frame)

    def send(self, sender: str, receiver: str, frame: bytes) -> None:
        raise NotImplementedError

    def recv(self, receiver: str, timeout: float | None = DEFAULT_TIMEOUT_S) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass

    @property
    def total_messages(self) -> int:
        return len(self.records)

    @property
    def total_bytes(self) -> int:
        return sum(r.n_bytes for r in self.records)


class InProcessTransport(Transport):
    """Queue-backed delivery between parties in one process."""

    def __init__(self, party_names, latency_ms: float = 10.0, keep_frames: bool = False):
        super().__init__(party_names, latency_ms, keep_frames)
        self._queues = {name: queue.Queue() for name in self.party_names}

    def send(self, sender: str, receiver: str, frame: bytes) -> None:
        if receiver not in self._queues:
            raise TransportError(f"unknown party {receiver!r}")
        self._record(sender, receiver, frame)
        self._queues[receiver].put(frame)

    def recv(self, receiver: str, timeout: float | None = DEFAULT_TIMEOUT_S) -> bytes:
        try:
            return self._queues[receiver].get(timeout=timeout)
        except queue.Empty:
            raise ProtocolTimeout(f"{receiver}: no message within {timeout}s") from None


class SocketTransport(Transport):
    """Localhost TCP delivery with the identical frame format.

    Each party gets a listening socket on an ephemeral port; a reader
    thread per accepted connection reassembles frames into the party's
    inbound queue. Connections between a party pair are opened lazily
    and reused.
    """

    def __init__(self, party_names, latency_ms: float = 10.0, keep_frames: bool = False):
        super().__init__(party_names, latency_ms, keep_frames)
        self._queues = {name: queue.Queue() for name in self.party_names}
        self._servers: dict[str, socket.socket] = {}
        self._addresses: dict[str, tuple[str, int]] = {}
        self._outgoing: dict[tuple[str, str], socket.socket] = {}
        self._accept_threads: list[threading.Thread] = []
        self._closing = False
        for name in self.party_names:
            server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            server.bind(("127.0.0.1", 0))
            server.listen()
            self._servers[name] = server
            self._addresses[name] = server.getsockname()
            thread = threading.Thread(target=self._accept_loop, args=(name, server), daemon=True)
            thread.start()
            self._accept_threads.append(thread)

    def _accept_loop(self, name: str, server: socket.socket) -> None:
        while True:
            try:
                conn, _ = server.accept()
            except OSError:
                return
            threading.Thread(target=self._reader_loop, args=(name, conn), daemon=True).start()

    def _reader_loop(self, name: str, conn: socket.socket) -> None:
        try:
            while True:
                header = self._read_exact(conn, 4)
                if header is None:
                    return
                (length,) = struct.unpack(">I", header)
                body = self._read_exact(conn, length)
                if body is None:
                    return
                self._queues[name].put(header + body)
        except OSError:
            return

    @staticmethod
    def _read_exact(conn: socket.socket, size: int) -> bytes | None:
        data = b""
        while len(data) < size:
            chunk = conn.recv(size - len(data))
            if not chunk:
                return None
            data += chunk
        return data

    def send(self, sender: str, receiver: str, frame: bytes) -> None:
        if receiver not in self._addresses:
            raise TransportError(f"unknown party {receiver!r}")
        key = (sender, receiver)
        conn = self._outgoing.get(key)
        if conn is None:
            conn = socket.create_connection(self._addresses[receiver])
            self._outgoing[key] = conn
        self._record(sender, receiver, frame)
        conn.sendall(frame)

    def recv(self, receiver: str, timeout: float | None = DEFAULT_TIMEOUT_S) -> bytes:
        try:
            return self._queues[receiver].get(timeout=timeout)
        except queue.Empty:
            raise ProtocolTimeout(f"{receiver}: no message within {timeout}s") from None

    def close(self) -> None:
        self._closing = True
        for conn in self._outgoing.values():
            try:
                conn.close()
            except OSError:
                pass
        for server in self._servers.values():
            try:
                server.close()
            except OSError:
                pass


class PartyEndpoint:
    """A party's handle on the transport, speaking wire messages."""

    def __init__(self, transport: Transport, name: str):
        self.transport = transport
        self.name = name
        self._seq = 0
        self._seq_lock = threading.Lock()

    def next_seq(self) -> int:
        with self._seq_lock:
            self._seq += 1
            return self._seq

    def send_message(self, receiver: str, message: wire.Message) -> None:
        self.transport.send(self.name, receiver, wire.encode_message(message))

    def recv_message(self, timeout: float | None = DEFAULT_TIMEOUT_S) -> wire.Message:
        return wire.decode_message(self.transport.recv(self.name, timeout))


def make_transport(kind: str, party_names, latency_ms: float = 10.0,
                   keep_frames: bool = False) -> Transport:
    if kind == "inproc":
        return InProcessTransport(party_names, latency_ms, keep_frames)
    if kind == "socket":
        return SocketTransport(party_names, latency_ms, keep_frames)
    raise ValueError(f"unknown transport kind {kind!r}")
