"""Party-to-party channel with length-prefixed framing and metering.

Wire layout (little-endian): a u32 length prefix covering the rest of the
frame, then session_id u64, protocol_tag u16, round_index u32, payload.
A matched symmetric exchange counts as one interaction round for both
parties; a one-directional flight counts as one round at both ends.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

from .errors import PeerClosed, ProtocolViolation, Timeout

FRAME_HEADER_BYTES = 18  # length prefix + session + tag + round index
_HEADER = struct.Struct("<IQHI")

DEFAULT_TIMEOUT = 30.0


# Protocol tag registry; values are stable across releases because replay
# transcripts embed them.
TAG_RAW = 0
TAG_SEC_MUL = 1
TAG_SEC_MAT_MUL = 2
TAG_SEC_CMP = 3
TAG_SEC_RELU = 4
TAG_SEC_MAXPOOL = 5
TAG_SEC_DIV = 6
TAG_SEC_MAT_INV = 7
TAG_SEC_SORT = 8
TAG_SEC_PCA = 9
TAG_SEC_KMEANS = 10
TAG_HKM_BUILD = 11
TAG_HKM_QUERY = 12
TAG_C2LSH_BUILD = 13
TAG_C2LSH_QUERY = 14
TAG_LINEAR_QUERY = 15
TAG_NORMALIZE = 16
TAG_HANDSHAKE = 17

TAG_NAMES = {
    TAG_RAW: "raw",
    TAG_SEC_MUL: "sec_mul",
    TAG_SEC_MAT_MUL: "sec_mat_mul",
    TAG_SEC_CMP: "sec_cmp",
    TAG_SEC_RELU: "sec_relu",
    TAG_SEC_MAXPOOL: "sec_maxpool",
    TAG_SEC_DIV: "sec_div",
    TAG_SEC_MAT_INV: "sec_mat_inv",
    TAG_SEC_SORT: "sec_sort",
    TAG_SEC_PCA: "sec_pca",
    TAG_SEC_KMEANS: "sec_kmeans",
    TAG_HKM_BUILD: "hkm_build",
    TAG_HKM_QUERY: "hkm_query",
    TAG_C2LSH_BUILD: "c2lsh_build",
    TAG_C2LSH_QUERY: "c2lsh_query",
    TAG_LINEAR_QUERY: "linear_query",
    TAG_NORMALIZE: "normalize",
    TAG_HANDSHAKE: "handshake",
}


@dataclass(frozen=True)
class Frame:
    session_id: int
    protocol_tag: int
    round_index: int
    payload: bytes

    def encode(self) -> bytes:
        body_len = 8 + 2 + 4 + len(self.payload)
        return _HEADER.pack(body_len, self.session_id, self.protocol_tag,
                            self.round_index) + self.payload

    @property
    def wire_bytes(self) -> int:
        return FRAME_HEADER_BYTES + len(self.payload)


def decode_frame(header: bytes, payload: bytes) -> Frame:
    body_len, session_id, tag, round_index = _HEADER.unpack(header)
    if body_len != 14 + len(payload):
        raise ProtocolViolation("frame length prefix does not match payload")
    return Frame(session_id, tag, round_index, payload)


@dataclass
class SessionMeter:
    """Monotone per-protocol-tag interaction-round and byte counters."""

    rounds: dict[int, int] = field(default_factory=dict)
    bytes_sent: dict[int, int] = field(default_factory=dict)

    def add_round(self, tag: int) -> None:
        self.rounds[tag] = self.rounds.get(tag, 0) + 1

    def add_bytes(self, tag: int, n: int) -> None:
        self.bytes_sent[tag] = self.bytes_sent.get(tag, 0) + n

    def snapshot(self) -> tuple[dict[int, int], dict[int, int]]:
        return dict(self.rounds), dict(self.bytes_sent)

    def total_bytes(self, tag: int | None = None) -> int:
        if tag is None:
            return sum(self.bytes_sent.values())
        return self.bytes_sent.get(tag, 0)


class Channel:
    """Base channel: framing, ordering checks and the meter.

    Subclasses provide ``_send_bytes`` / ``_recv_frame``.  One channel
    belongs to one session driven by a single logical task.
    """

    def __init__(self, session_id: int = 0, timeout: float = DEFAULT_TIMEOUT,
                 record_transcript: bool = False):
        self.session_id = session_id
        self.timeout = timeout
        self.meter = SessionMeter()
        self._send_round: dict[int, int] = {}
        self._recv_round: dict[int, int] = {}
        self.transcript: list[bytes] | None = [] if record_transcript else None

    # -- subclass surface ---------------------------------------------

    def _send_bytes(self, data: bytes) -> None:
        raise NotImplementedError

    def _recv_frame(self) -> Frame:
        raise NotImplementedError

    def close(self) -> None:
        pass

    # -- framing ---------------------------------------------------------

    def _next_round_index(self, tag: int) -> int:
        idx = self._send_round.get(tag, 0)
        self._send_round[tag] = idx + 1
        return idx

    def send(self, tag: int, payload: bytes) -> Frame:
        frame = Frame(self.session_id, tag, self._next_round_index(tag), payload)
        data = frame.encode()
        if self.transcript is not None:
            self.transcript.append(data)
        self._send_bytes(data)
        self.meter.add_bytes(tag, frame.wire_bytes)
        return frame

    def recv(self, expect_tag: int | None = None) -> Frame:
        frame = self._recv_frame()
        if frame.session_id != self.session_id:
            raise ProtocolViolation(
                f"frame for session {frame.session_id}, expected {self.session_id}")
        if expect_tag is not None and frame.protocol_tag != expect_tag:
            raise ProtocolViolation(
                f"expected tag {expect_tag}, got {frame.protocol_tag}")
        last = self._recv_round.get(frame.protocol_tag)
        if last is not None and frame.round_index <= last:
            raise ProtocolViolation(
                f"round index {frame.round_index} not after {last} "
                f"for tag {frame.protocol_tag}")
        self._recv_round[frame.protocol_tag] = frame.round_index
        return frame

    # -- round-counted operations ------------------------------------------

    def batched_exchange(self, tag: int, payload: bytes) -> bytes:
        """Symmetric swap; both parties call it and it costs one round."""
        self.send(tag, payload)
        frame = self.recv(expect_tag=tag)
        self.meter.add_round(tag)
        return frame.payload

    def send_flight(self, tag: int, payload: bytes) -> None:
        """One-directional flight; costs one round at both ends."""
        self.send(tag, payload)
        self.meter.add_round(tag)

    def recv_flight(self, tag: int) -> bytes:
        frame = self.recv(expect_tag=tag)
        self.meter.add_round(tag)
        return frame.payload


class LocalChannel(Channel):
    """In-process backend: a pair of FIFO queues."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, **kw):
        super().__init__(**kw)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _send_bytes(self, data: bytes) -> None:
        if self._closed:
            raise PeerClosed("channel closed")
        self._outbox.put(data)

    def _recv_frame(self) -> Frame:
        try:
            data = self._inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise Timeout(f"no frame within {self.timeout}s") from None
        if data is None:
            raise PeerClosed("peer closed the channel")
        return decode_frame(data[:18], data[18:])

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def local_pair(session_id: int = 0, timeout: float = DEFAULT_TIMEOUT,
               record_transcript: bool = False) -> tuple[LocalChannel, LocalChannel]:
    q12: queue.Queue = queue.Queue()
    q21: queue.Queue = queue.Queue()
    a = LocalChannel(q21, q12, session_id=session_id, timeout=timeout,
                     record_transcript=record_transcript)
    b = LocalChannel(q12, q21, session_id=session_id, timeout=timeout,
                     record_transcript=record_transcript)
    return a, b


class TcpChannel(Channel):
    """TCP backend carrying the same frames as the in-process queues.

    Sends run on a helper thread so that large symmetric exchanges cannot
    deadlock on full socket buffers.
    """

    def __init__(self, sock: socket.socket, **kw):
        super().__init__(**kw)
        self._sock = sock
        self._sock.settimeout(self.timeout)
        self._send_queue: queue.Queue = queue.Queue()
        self._send_error: Exception | None = None
        self._sender = threading.Thread(target=self._send_loop, daemon=True)
        self._sender.start()

    def _send_loop(self) -> None:
        while True:
            data = self._send_queue.get()
            if data is None:
                return
            try:
                self._sock.sendall(data)
            except OSError as exc:
                self._send_error = exc
                return

    def _send_bytes(self, data: bytes) -> None:
        if self._send_error is not None:
            raise PeerClosed(f"send failed: {self._send_error}")
        self._send_queue.put(data)

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout:
                raise Timeout(f"no data within {self.timeout}s") from None
            if not chunk:
                raise PeerClosed("peer closed the connection")
            buf.extend(chunk)
        return bytes(buf)

    def _recv_frame(self) -> Frame:
        prefix = self._recv_exact(4)
        body_len, = struct.unpack("<I", prefix)
        body = self._recv_exact(body_len)
        return decode_frame(prefix + body[:14], body[14:])

    def close(self) -> None:
        self._send_queue.put(None)
        self._sender.join(timeout=1.0)
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def tcp_listen(host: str, port: int, **kw) -> TcpChannel:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    conn, _ = srv.accept()
    srv.close()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpChannel(conn, **kw)


def tcp_connect(host: str, port: int, retries: int = 50, delay: float = 0.1, **kw) -> TcpChannel:
    import time

    last: Exception | None = None
    for _ in range(retries):
        try:
            sock = socket.create_connection((host, port), timeout=kw.get("timeout", DEFAULT_TIMEOUT))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return TcpChannel(sock, **kw)
        except OSError as exc:
            last = exc
            time.sleep(delay)
    raise PeerClosed(f"could not connect to {host}:{port}: {last}")
