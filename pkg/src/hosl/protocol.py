"""Wire messages, binary framing and the two transport realisations.

Frame layout (all integers little-endian)::

    b"HOSL" | version:u8 = 1 | tag:u8 | payload_len:u32 | payload

Tags: 0 Forward, 1 LossReply, 2 Ack, 3 GradReply.

Forward payload::

    phase:u8 | batch:u32 | rows:u32 | cols:u32 | activations f64[rows*cols]
    | label_rows:u32 | label_cols:u32 | labels f64[label_rows*label_cols]

LossReply carries one f64, Ack nothing. GradReply reuses the tensor encoding
``rows:u32 | cols:u32 | f64[rows*cols]``.
"""

from __future__ import annotations

import enum
import queue
import socket
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

MAGIC = b"HOSL"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size  # 10

TAG_FORWARD, TAG_LOSS, TAG_ACK, TAG_GRAD = 0, 1, 2, 3

_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")


class ProtocolError(Exception):
    """Frame is well-delimited but its contents are not valid."""


class FramingError(ProtocolError):
    """Frame boundaries are wrong: truncated or length mismatch."""


class EncodeError(ValueError):
    pass


class TransportError(ConnectionError):
    pass


class ConnectionClosed(TransportError):
    """The peer closed the channel (or this end already did)."""


class Phase(enum.IntEnum):
    INFERENCE = 0
    COMPUTE_GRAD = 1


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise EncodeError(f"expected a matrix, got shape {a.shape}")
    return a


@dataclass(eq=False)
class Forward:
    phase: Phase
    activations: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.phase = Phase(self.phase)
        self.activations = _as_matrix(self.activations)
        self.labels = _as_matrix(self.labels)

    def __eq__(self, other):
        return (
            isinstance(other, Forward)
            and self.phase == other.phase
            and _same(self.activations, other.activations)
            and _same(self.labels, other.labels)
        )


@dataclass(frozen=True)
class LossReply:
    value: float


@dataclass(frozen=True)
class Ack:
    pass


@dataclass(eq=False)
class GradReply:
    grad: np.ndarray

    def __post_init__(self):
        self.grad = _as_matrix(self.grad)

    def __eq__(self, other):
        return isinstance(other, GradReply) and _same(self.grad, other.grad)


Message = Union[Forward, LossReply, Ack, GradReply]


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.astype("<f8").tobytes() == b.astype("<f8").tobytes()


def _tensor_bytes(a: np.ndarray) -> bytes:
    if not np.all(np.isfinite(a)):
        raise EncodeError("tensor contains non-finite values")
    rows, cols = a.shape
    return struct.pack("<II", rows, cols) + np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode(msg: Message) -> bytes:
    if isinstance(msg, Forward):
        h = msg.activations
        if h.shape[0] < 1:
            raise EncodeError("empty activation batch")
        if msg.labels.shape[0] != h.shape[0]:
            raise EncodeError("labels and activations disagree on batch size")
        payload = (
            bytes([int(msg.phase)])
            + _U32.pack(h.shape[0])
            + _tensor_bytes(h)
            + _tensor_bytes(msg.labels)
        )
        tag = TAG_FORWARD
    elif isinstance(msg, LossReply):
        if not np.isfinite(msg.value):
            raise EncodeError("loss is not finite")
        payload, tag = _F64.pack(msg.value), TAG_LOSS
    elif isinstance(msg, Ack):
        payload, tag = b"", TAG_ACK
    elif isinstance(msg, GradReply):
        payload, tag = _tensor_bytes(msg.grad), TAG_GRAD
    else:
        raise EncodeError(f"not a message: {msg!r}")
    return HEADER.pack(MAGIC, VERSION, tag, len(payload)) + payload


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FramingError("payload truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def tensor(self) -> np.ndarray:
        rows, cols = self.u32(), self.u32()
        data = self.take(8 * rows * cols)
        return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(rows, cols)


def parse_header(head: bytes) -> tuple[int, int]:
    """Validate a 10-byte header; return (tag, payload_len)."""
    if len(head) < HEADER_SIZE:
        raise FramingError("header truncated")
    magic, version, tag, length = HEADER.unpack(head[:HEADER_SIZE])
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported version {version}")
    if tag not in (TAG_FORWARD, TAG_LOSS, TAG_ACK, TAG_GRAD):
        raise ProtocolError(f"unknown tag {tag}")
    return tag, length


def decode(frame: bytes) -> Message:
    tag, length = parse_header(frame)
    payload = frame[HEADER_SIZE:]
    if len(payload) < length:
        raise FramingError(f"declared {length} payload bytes, have {len(payload)}")
    if len(payload) > length:
        raise FramingError(f"declared {length} payload bytes, got {len(payload)}")
    r = _Reader(payload)
    if tag == TAG_FORWARD:
        phase = r.take(1)[0]
        if phase not in (0, 1):
            raise ProtocolError(f"unknown phase {phase}")
        batch = r.u32()
        h = r.tensor()
        y = r.tensor()
        if h.shape[0] != batch or y.shape[0] != batch:
            raise ProtocolError("batch size field disagrees with tensor rows")
        msg: Message = Forward(Phase(phase), h, y)
    elif tag == TAG_LOSS:
        msg = LossReply(_F64.unpack(r.take(8))[0])
    elif tag == TAG_ACK:
        msg = Ack()
    else:
        msg = GradReply(r.tensor())
    if r.pos != length:
        raise FramingError("payload has trailing bytes")
    return msg


Tap = Callable[[str, bytes], None]


class Transport:
    """Reliable, ordered, blocking message channel.

    Subclasses move whole frames. ``taps`` see every frame as ("tx" | "rx",
    bytes) after it is sent or received, which is how transcripts and
    byte ledgers are collected.
    """

    def __init__(self):
        self.taps: list[Tap] = []

    def send(self, msg: Message) -> None:
        frame = encode(msg)
        self._send_frame(frame)
        for tap in self.taps:
            tap("tx", frame)

    def recv(self) -> Message:
        frame = self._recv_frame()
        msg = decode(frame)
        for tap in self.taps:
            tap("rx", frame)
        return msg

    def _send_frame(self, frame: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_CLOSED = object()


class QueueTransport(Transport):
    """One end of an in-process channel; build with ``queue_pair()``."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float | None = None):
        super().__init__()
        self._inbox, self._outbox = inbox, outbox
        self._closed = False
        self._peer_closed = False
        self.timeout = timeout

    def _send_frame(self, frame):
        if self._closed or self._peer_closed:
            raise ConnectionClosed("channel closed")
        self._outbox.put(frame)

    def _recv_frame(self):
        if self._closed or self._peer_closed:
            raise ConnectionClosed("channel closed")
        try:
            item = self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise TransportError("receive timed out") from None
        if item is _CLOSED:
            self._peer_closed = True
            raise ConnectionClosed("peer closed the channel")
        return item

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def queue_pair(timeout: float | None = None) -> tuple[QueueTransport, QueueTransport]:
    """(client_end, server_end) of a fresh in-process channel."""
    a, b = queue.Queue(), queue.Queue()
    return QueueTransport(a, b, timeout), QueueTransport(b, a, timeout)


class TcpTransport(Transport):
    def __init__(self, sock: socket.socket):
        super().__init__()
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._closed = False

    def _send_frame(self, frame):
        if self._closed:
            raise ConnectionClosed("socket closed")
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise TransportError(str(exc)) from exc

    def _recv_exact(self, n: int, at_boundary: bool) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                raise TransportError(str(exc)) from exc
            if not chunk:
                if at_boundary and not buf:
                    raise ConnectionClosed("peer closed the connection")
                raise FramingError("connection closed mid-frame")
            buf.extend(chunk)
        return bytes(buf)

    def _recv_frame(self):
        if self._closed:
            raise ConnectionClosed("socket closed")
        head = self._recv_exact(HEADER_SIZE, at_boundary=True)
        _, length = parse_header(head)
        return head + self._recv_exact(length, at_boundary=False)

    def close(self):
        if self._closed:
            return
        self._closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def parse_address(spec: str) -> tuple[str, int]:
    host, _, port = spec.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {spec!r}")
    return host, int(port)


class TcpListener:
    """Bound listening socket; ``port`` is known before anyone connects."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        self.sock = socket.create_server((host, port))
        self.port = self.sock.getsockname()[1]

    def accept(self, timeout: float | None = None) -> TcpTransport:
        self.sock.settimeout(timeout)
        try:
            conn, _ = self.sock.accept()
        except socket.timeout:
            raise TransportError("no client connected") from None
        conn.settimeout(None)
        return TcpTransport(conn)

    def close(self):
        self.sock.close()


def tcp_connect(host: str, port: int, timeout: float = 10.0) -> TcpTransport:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
    sock.settimeout(None)
    return TcpTransport(sock)


def tcp_pair() -> tuple[TcpTransport, TcpTransport]:
    """Loopback (client_end, server_end) connected over a real socket."""
    listener = TcpListener("127.0.0.1", 0)
    result: dict = {}

    def _accept():
        result["server"] = listener.accept(timeout=10.0)

    th = threading.Thread(target=_accept)
    th.start()
    client = tcp_connect("127.0.0.1", listener.port)
    th.join()
    listener.close()
    return client, result["server"]
