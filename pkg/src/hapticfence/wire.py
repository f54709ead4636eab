"""Byte-exact transform/mesh/force/status streaming between processes.

Frame layout (all integers and floats big-endian):

    u16 version (=1) | u8 msg_type | 16-byte zero-padded ASCII name |
    u64 timestamp ns | u32 body_len | u32 CRC-32 of body | body

Header is exactly 35 bytes.  The CRC is the standard CRC-32 (polynomial
0x04C11DB7 in normal form; computed here via zlib's reflected implementation).
Decode errors are distinct exception types so a live session can drop a bad
message and keep the stream framing intact.
"""

from __future__ import annotations

import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import (
    BadMagicOrVersion,
    ChecksumMismatch,
    ConnectionLost,
    InvalidBody,
    NameTooLong,
    OversizeBody,
    Truncated,
)
from .frames import RigidTransform
from .servo import Mailbox

HEADER = struct.Struct(">HB16sQII")
HEADER_SIZE = HEADER.size  # 35
VERSION = 1
MAX_BODY = 16 * 1024 * 1024
DEFAULT_PORT = 18944

MSG_TRANSFORM = 1
MSG_MESH = 2
MSG_STATUS = 3
MSG_FORCE = 4


@dataclass(frozen=True, eq=False)
class TransformPayload:
    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,) mm

    def to_bytes(self) -> bytes:
        m = np.column_stack([np.asarray(self.rotation, float), np.asarray(self.translation, float)])
        return m.astype(">f8").tobytes()  # row-major 3x4

    @classmethod
    def from_bytes(cls, body: bytes) -> "TransformPayload":
        if len(body) != 96:
            raise InvalidBody(f"transform body must be 96 bytes, got {len(body)}")
        m = np.frombuffer(body, dtype=">f8").reshape(3, 4)
        r = np.ascontiguousarray(m[:, :3], dtype=np.float64)
        if not np.all(np.isfinite(m)):
            raise InvalidBody("transform contains non-finite values")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise InvalidBody("rotation not orthonormal within 1e-6")
        return cls(r, np.ascontiguousarray(m[:, 3]))

    def to_rigid(self) -> RigidTransform:
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] *= -1
            r = u @ vt
        return RigidTransform(r, self.translation)

    @classmethod
    def from_rigid(cls, t: RigidTransform) -> "TransformPayload":
        return cls(t.rotation.copy(), t.translation.copy())

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, TransformPayload)
            and np.array_equal(self.rotation, other.rotation)
            and np.array_equal(self.translation, other.translation)
        )


@dataclass(frozen=True, eq=False)
class MeshPayload:
    vertices: np.ndarray  # (V, 3) f64 mm
    triangles: np.ndarray  # (T, 3) u32

    def to_bytes(self) -> bytes:
        v = np.asarray(self.vertices, np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise InvalidBody("triangle index out of range")
        return struct.pack(">II", len(v), len(t)) + v.astype(">f8").tobytes() + t.astype(">u4").tobytes()

    @classmethod
    def from_bytes(cls, body: bytes) -> "MeshPayload":
        if len(body) < 8:
            raise InvalidBody("mesh body shorter than its counts")
        nv, nt = struct.unpack_from(">II", body, 0)
        need = 8 + nv * 24 + nt * 12
        if len(body) != need:
            raise InvalidBody(f"mesh body length {len(body)} != expected {need}")
        v = np.frombuffer(body, dtype=">f8", count=nv * 3, offset=8).reshape(nv, 3)
        t = np.frombuffer(body, dtype=">u4", count=nt * 3, offset=8 + nv * 24).reshape(nt, 3)
        if nt and nv == 0:
            raise InvalidBody("triangles without vertices")
        if nt and int(t.max()) >= nv:
            raise InvalidBody("triangle index out of range")
        return cls(np.ascontiguousarray(v, np.float64), np.ascontiguousarray(t, np.int64))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MeshPayload)
            and np.array_equal(self.vertices, other.vertices)
            and np.array_equal(self.triangles, other.triangles)
        )


@dataclass(frozen=True, eq=False)
class ForcePayload:
    force: np.ndarray  # (3,) N

    def to_bytes(self) -> bytes:
        f = np.asarray(self.force, np.float64).reshape(3)
        if not np.all(np.isfinite(f)):
            raise InvalidBody("force must be finite")
        return f.astype(">f8").tobytes()

    @classmethod
    def from_bytes(cls, body: bytes) -> "ForcePayload":
        if len(body) != 24:
            raise InvalidBody(f"force body must be 24 bytes, got {len(body)}")
        f = np.frombuffer(body, dtype=">f8").astype(np.float64)
        if not np.all(np.isfinite(f)):
            raise InvalidBody("force must be finite")
        return cls(f)

    def __eq__(self, other) -> bool:
        return isinstance(other, ForcePayload) and np.array_equal(self.force, other.force)


@dataclass(frozen=True)
class StatusPayload:
    code: int
    text: str = ""

    def to_bytes(self) -> bytes:
        raw = self.text.encode("utf-8")
        if not 0 <= self.code <= 0xFFFF:
            raise InvalidBody("status code must fit u16")
        if len(raw) > 0xFFFF:
            raise InvalidBody("status text too long")
        return struct.pack(">HH", self.code, len(raw)) + raw

    @classmethod
    def from_bytes(cls, body: bytes) -> "StatusPayload":
        if len(body) < 4:
            raise InvalidBody("status body shorter than its header")
        code, n = struct.unpack_from(">HH", body, 0)
        if len(body) != 4 + n:
            raise InvalidBody(f"status body length {len(body)} != expected {4 + n}")
        try:
            text = body[4:].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidBody(f"status text not UTF-8: {exc}") from exc
        return cls(code, text)


_PAYLOADS = {
    MSG_TRANSFORM: TransformPayload,
    MSG_MESH: MeshPayload,
    MSG_STATUS: StatusPayload,
    MSG_FORCE: ForcePayload,
}


@dataclass(frozen=True)
class WireMessage:
    msg_type: int
    name: str
    timestamp_ns: int
    payload: object

    @classmethod
    def transform(cls, name: str, timestamp_ns: int, t: RigidTransform) -> "WireMessage":
        return cls(MSG_TRANSFORM, name, timestamp_ns, TransformPayload.from_rigid(t))

    @classmethod
    def mesh(cls, name: str, timestamp_ns: int, vertices, triangles) -> "WireMessage":
        return cls(MSG_MESH, name, timestamp_ns, MeshPayload(np.asarray(vertices, float), np.asarray(triangles)))

    @classmethod
    def force(cls, name: str, timestamp_ns: int, f) -> "WireMessage":
        return cls(MSG_FORCE, name, timestamp_ns, ForcePayload(np.asarray(f, float)))

    @classmethod
    def status(cls, name: str, timestamp_ns: int, code: int, text: str = "") -> "WireMessage":
        return cls(MSG_STATUS, name, timestamp_ns, StatusPayload(code, text))


def _check_name(name: str) -> bytes:
    raw = name.encode("ascii", errors="strict") if name.isascii() else None
    if raw is None or not all(0x20 <= b <= 0x7E for b in raw):
        raise InvalidBody(f"name must be printable ASCII: {name!r}")
    if len(raw) > 16:
        raise NameTooLong(f"name {name!r} exceeds 16 bytes")
    return raw.ljust(16, b"\x00")


def encode(msg: WireMessage) -> bytes:
    if msg.msg_type not in _PAYLOADS:
        raise InvalidBody(f"unknown msg_type {msg.msg_type}")
    if not isinstance(msg.payload, _PAYLOADS[msg.msg_type]):
        raise InvalidBody("payload class does not match msg_type")
    if not 0 <= msg.timestamp_ns < 2**64:
        raise InvalidBody("timestamp must fit u64")
    body = msg.payload.to_bytes()
    if len(body) > MAX_BODY:
        raise OversizeBody(f"body {len(body)} bytes exceeds {MAX_BODY}")
    name = _check_name(msg.name)
    head = HEADER.pack(VERSION, msg.msg_type, name, msg.timestamp_ns, len(body), zlib.crc32(body))
    return head + body


def decode_prefix(data: bytes) -> tuple[WireMessage, int]:
    """Decode one message from the start of `data`; return (message, bytes consumed)."""
    if len(data) < HEADER_SIZE:
        raise Truncated(f"need {HEADER_SIZE} header bytes, have {len(data)}")
    version, msg_type, raw_name, ts, body_len, crc = HEADER.unpack_from(data, 0)
    if version != VERSION:
        raise BadMagicOrVersion(f"version {version} != {VERSION}")
    if msg_type not in _PAYLOADS:
        raise InvalidBody(f"unknown msg_type {msg_type}")
    if body_len > MAX_BODY:
        raise OversizeBody(f"declared body {body_len} bytes exceeds {MAX_BODY}")
    end = HEADER_SIZE + body_len
    if len(data) < end:
        raise Truncated(f"need {end} bytes, have {len(data)}")
    body = bytes(data[HEADER_SIZE:end])
    if zlib.crc32(body) != crc:
        raise ChecksumMismatch("body CRC-32 mismatch")
    name_bytes = raw_name.rstrip(b"\x00")
    if not all(0x20 <= b <= 0x7E for b in name_bytes):
        raise InvalidBody("name not printable ASCII")
    payload = _PAYLOADS[msg_type].from_bytes(body)
    return WireMessage(msg_type, name_bytes.decode("ascii"), ts, payload), end


def decode(data: bytes) -> WireMessage:
    msg, used = decode_prefix(data)
    if used != len(data):
        raise InvalidBody(f"{len(data) - used} trailing bytes after message")
    return msg


# -- TCP transport -------------------------------------------------------------


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    chunks = []
    got = 0
    while got < n:
        try:
            part = sock.recv(n - got)
        except OSError:
            return None
        if not part:
            return None
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def read_message(sock: socket.socket) -> WireMessage | None:
    """Read one framed message; None on clean EOF / closed socket.

    Checksum/body errors raise (framing already consumed, caller may continue).
    """
    head = _recv_exact(sock, HEADER_SIZE)
    if head is None:
        return None
    version, msg_type, raw_name, ts, body_len, crc = HEADER.unpack(head)
    if version != VERSION:
        raise BadMagicOrVersion(f"version {version} != {VERSION}")
    if body_len > MAX_BODY:
        raise OversizeBody(f"declared body {body_len} bytes exceeds {MAX_BODY}")
    body = _recv_exact(sock, body_len) if body_len else b""
    if body is None:
        return None
    msg, _ = decode_prefix(head + body)
    return msg


@dataclass
class StreamConfig:
    box: Mailbox
    rate_hz: float = 60.0


class WireServer:
    """Pushes the latest message of each registered stream to every client.

    Latest-value drop policy: if a client polls slower than a stream updates,
    intermediate messages are skipped and counted; the per-connection drop
    total rides on the 1 s keepalive STATUS.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, keepalive_s: float = 1.0):
        self._host = host
        self._port = port
        self.keepalive_s = keepalive_s
        self._streams: dict[str, StreamConfig] = {}
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()

    def add_stream(self, name: str, box: Mailbox, rate_hz: float = 60.0) -> None:
        _check_name(name)
        self._streams[name] = StreamConfig(box, rate_hz)

    @property
    def port(self) -> int:
        if self._listener is None:
            return self._port
        return self._listener.getsockname()[1]

    def start(self) -> None:
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((self._host, self._port))
        self._listener.listen(8)
        self._listener.settimeout(0.2)
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        if self._listener is not None:
            self._listener.close()
        for t in self._threads:
            t.join(timeout=2.0)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        last_seq = {name: 0 for name in self._streams}
        next_due = {name: 0.0 for name in self._streams}
        drops = 0
        last_send = time.monotonic()
        try:
            while not self._stop.is_set():
                now = time.monotonic()
                sent_any = False
                for name, cfg in self._streams.items():
                    if now < next_due[name]:
                        continue
                    snap = cfg.box.read()
                    if snap is None or snap.seq == last_seq[name]:
                        continue
                    drops += max(0, snap.seq - last_seq[name] - 1)
                    last_seq[name] = snap.seq
                    conn.sendall(encode(snap.value))
                    next_due[name] = now + 1.0 / cfg.rate_hz
                    sent_any = True
                if now - last_send >= self.keepalive_s:
                    ka = WireMessage.status(
                        "server", int(time.time_ns()), 0, f"keepalive drops={drops}"
                    )
                    conn.sendall(encode(ka))
                    sent_any = True
                if sent_any:
                    last_send = now
                time.sleep(0.001)
        except OSError:
            pass  # client went away
        finally:
            conn.close()


class WireClient:
    """Subscribing client with framing-preserving error recovery and
    auto-reconnect (backoff 100 ms doubling to 2 s)."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        subscriptions: set[str] | None = None,
        connect_attempts: int = 5,
        on_message: Callable[[WireMessage], None] | None = None,
    ):
        self.host = host
        self.port = port
        self.subscriptions = subscriptions
        self.connect_attempts = connect_attempts
        self.on_message = on_message
        self.received = 0
        self.decode_errors = 0
        self.reconnects = 0
        self.connected = False
        self._latest: dict[tuple[str, int], WireMessage] = {}
        self._lock = threading.Lock()
        self._sock: socket.socket | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _dial(self) -> socket.socket:
        backoff = 0.1
        last_exc: Exception | None = None
        for _ in range(self.connect_attempts):
            if self._stop.is_set():
                break
            try:
                return socket.create_connection((self.host, self.port), timeout=2.0)
            except OSError as exc:
                last_exc = exc
                time.sleep(backoff)
                backoff = min(backoff * 2, 2.0)
        raise ConnectionLost(f"could not reach {self.host}:{self.port}: {last_exc}")

    def connect(self) -> None:
        self._sock = self._dial()
        self.connected = True
        self._thread = threading.Thread(target=self._read_loop, daemon=True)
        self._thread.start()

    def close(self) -> None:
        self._stop.set()
        if self._sock is not None:
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
        self.connected = False

    def latest(self, name: str, msg_type: int) -> Optional[WireMessage]:
        with self._lock:
            return self._latest.get((name, msg_type))

    def _read_loop(self) -> None:
        while not self._stop.is_set():
            try:
                msg = read_message(self._sock)
            except (ChecksumMismatch, InvalidBody, OversizeBody):
                self.decode_errors += 1
                continue  # framing intact: drop and carry on
            except (BadMagicOrVersion, Truncated, OSError):
                msg = None  # stream poisoned or socket error: reconnect
            if msg is None:
                if self._stop.is_set():
                    return
                self.connected = False
                try:
                    self._sock.close()
                    self._sock = self._dial()
                    self.connected = True
                    self.reconnects += 1
                    continue
                except ConnectionLost:
                    return
            else:
                if self.subscriptions is not None and msg.name not in self.subscriptions:
                    continue
                self.received += 1
                with self._lock:
                    self._latest[(msg.name, msg.msg_type)] = msg
                if self.on_message is not None:
                    self.on_message(msg)
