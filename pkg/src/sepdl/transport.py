"""Message envelopes and transports between the master and worker nodes.

Every envelope has a documented binary encoding (little-endian, float64
matrices in C order); ``byte_size`` is the exact length of that encoding,
and transports stamp it on every send so communication volume can be
audited even when no bytes actually move (in-memory channels).

Wire framing for byte streams: an 8-byte little-endian frame length
(counting everything after the length field), a 1-byte kind tag, then the
payload.
"""

from __future__ import annotations

import enum
import queue
import struct
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .update import DictMode, PartialSums, Side


class Disconnected(ConnectionError):
    """Peer closed the channel."""


class FrameCorrupt(ValueError):
    """A stream frame failed to parse."""


class EnvelopeKind(enum.IntEnum):
    BROADCAST_DICTS = 1
    PARTIAL_LEFT = 2
    PARTIAL_RIGHT = 3
    SHARD_ASSIGN = 4


MASTER = -1  # sender id of the master node


@dataclass
class BroadcastDicts:
    """One or both dictionary factors pushed from the master."""

    mode: DictMode
    left: Optional[np.ndarray] = None
    right: Optional[np.ndarray] = None


@dataclass
class ShardAssign:
    node_id: int
    indices: np.ndarray


Payload = Union[BroadcastDicts, PartialSums, ShardAssign]


@dataclass
class Envelope:
    kind: EnvelopeKind
    sender: int
    payload: Payload
    byte_size: int = 0


def _mat_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes(order="C")


_PARTIAL_HEADER = struct.Struct("<iiQddqdBIII")


def encode_payload(env: Envelope) -> bytes:
    """Serialize an envelope's payload (excluding the kind tag)."""
    p = env.payload
    if env.kind is EnvelopeKind.BROADCAST_DICTS:
        assert isinstance(p, BroadcastDicts)
        flags = (1 if p.left is not None else 0) | (2 if p.right is not None else 0)
        some = p.left if p.left is not None else p.right
        if some is None:
            raise ValueError("broadcast must carry at least one factor")
        m = some.shape[0]
        n1 = p.left.shape[1] if p.left is not None else 0
        n2 = p.right.shape[1] if p.right is not None else 0
        head = struct.pack(
            "<iBBIII", env.sender,
            0 if p.mode is DictMode.GENERAL else 1, flags, m, n1, n2,
        )
        body = b"".join(
            _mat_bytes(d) for d in (p.left, p.right) if d is not None
        )
        return head + body
    if env.kind in (EnvelopeKind.PARTIAL_LEFT, EnvelopeKind.PARTIAL_RIGHT):
        assert isinstance(p, PartialSums)
        gram_n = 0 if p.gram is None else p.gram.shape[0]
        head = _PARTIAL_HEADER.pack(
            env.sender, p.node_id, p.sample_count,
            p.coding_residual_sq, p.code_energy_sq,
            p.worst_index, p.worst_residual_sq,
            0 if p.gram is None else 1, gram_n,
            p.cross.shape[0], p.cross.shape[1],
        )
        body = b"" if p.gram is None else _mat_bytes(p.gram)
        return head + body + _mat_bytes(p.cross)
    if env.kind is EnvelopeKind.SHARD_ASSIGN:
        assert isinstance(p, ShardAssign)
        idx = np.ascontiguousarray(p.indices, dtype="<i8")
        return struct.pack("<iiQ", env.sender, p.node_id, idx.size) + idx.tobytes()
    raise ValueError(f"unknown envelope kind {env.kind!r}")


def _take(buf: bytes, pos: int, n: int) -> tuple[bytes, int]:
    if pos + n > len(buf):
        raise FrameCorrupt("payload shorter than its header promises")
    return buf[pos:pos + n], pos + n


def decode_payload(kind: EnvelopeKind, payload: bytes) -> Envelope:
    """Inverse of :func:`encode_payload`."""
    try:
        if kind is EnvelopeKind.BROADCAST_DICTS:
            head, pos = _take(payload, 0, 16)
            sender, mode_tag, flags, m, n1, n2 = struct.unpack("<iBBIII", head)
            mode = DictMode.GENERAL if mode_tag == 0 else DictMode.ORTHONORMAL
            left = right = None
            if flags & 1:
                raw, pos = _take(payload, pos, 8 * m * n1)
                left = np.frombuffer(raw, dtype="<f8").reshape(m, n1).copy()
            if flags & 2:
                raw, pos = _take(payload, pos, 8 * m * n2)
                right = np.frombuffer(raw, dtype="<f8").reshape(m, n2).copy()
            if pos != len(payload):
                raise FrameCorrupt("trailing bytes after broadcast payload")
            env = Envelope(kind, sender, BroadcastDicts(mode, left, right))
        elif kind in (EnvelopeKind.PARTIAL_LEFT, EnvelopeKind.PARTIAL_RIGHT):
            head, pos = _take(payload, 0, _PARTIAL_HEADER.size)
            (sender, node_id, sample_count, resid_sq, energy_sq, worst_idx,
             worst_sq, has_gram, gram_n, cr, cc) = _PARTIAL_HEADER.unpack(head)
            gram = None
            if has_gram:
                raw, pos = _take(payload, pos, 8 * gram_n * gram_n)
                gram = np.frombuffer(raw, dtype="<f8").reshape(gram_n, gram_n).copy()
            raw, pos = _take(payload, pos, 8 * cr * cc)
            cross = np.frombuffer(raw, dtype="<f8").reshape(cr, cc).copy()
            if pos != len(payload):
                raise FrameCorrupt("trailing bytes after partial payload")
            side = Side.LEFT if kind is EnvelopeKind.PARTIAL_LEFT else Side.RIGHT
            env = Envelope(kind, sender, PartialSums(
                side, node_id, sample_count, gram, cross,
                resid_sq, energy_sq, worst_idx, worst_sq,
            ))
        elif kind is EnvelopeKind.SHARD_ASSIGN:
            head, pos = _take(payload, 0, 16)
            sender, node_id, count = struct.unpack("<iiQ", head)
            raw, pos = _take(payload, pos, 8 * count)
            idx = np.frombuffer(raw, dtype="<i8").copy()
            if pos != len(payload):
                raise FrameCorrupt("trailing bytes after shard payload")
            env = Envelope(kind, sender, ShardAssign(node_id, idx))
        else:
            raise FrameCorrupt(f"unknown envelope kind tag {kind}")
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FrameCorrupt):
            raise
        raise FrameCorrupt(str(exc)) from exc
    env.byte_size = len(payload)
    return env


def stamp_byte_size(env: Envelope) -> Envelope:
    env.byte_size = len(encode_payload(env))
    return env


class InMemoryTransport:
    """Ordered, lossless in-process duplex channel.

    Byte accounting uses the serialized payload size even though the
    envelope object is handed over directly.
    """

    _CLOSED = object()

    def __init__(self, inbox: queue.SimpleQueue, outbox: queue.SimpleQueue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    @classmethod
    def pair(cls) -> tuple["InMemoryTransport", "InMemoryTransport"]:
        a_to_b: queue.SimpleQueue = queue.SimpleQueue()
        b_to_a: queue.SimpleQueue = queue.SimpleQueue()
        return cls(b_to_a, a_to_b), cls(a_to_b, b_to_a)

    def send(self, env: Envelope) -> None:
        if self._closed:
            raise Disconnected("transport closed locally")
        self._outbox.put(stamp_byte_size(env))

    def recv(self) -> Envelope:
        item = self._inbox.get()
        if item is self._CLOSED:
            raise Disconnected("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(self._CLOSED)


class StreamTransport:
    """Length-prefixed envelope frames over a reliable byte stream.

    ``stream`` must be a blocking binary file-like object (``read``,
    ``write``, ``flush``), e.g. ``socket.makefile("rwb")``.
    """

    def __init__(self, stream):
        self._stream = stream

    @classmethod
    def from_socket(cls, sock) -> "StreamTransport":
        return cls(sock.makefile("rwb"))

    def send(self, env: Envelope) -> None:
        payload = encode_payload(env)
        env.byte_size = len(payload)
        frame = struct.pack("<QB", 1 + len(payload), int(env.kind)) + payload
        try:
            self._stream.write(frame)
            self._stream.flush()
        except (BrokenPipeError, ValueError, OSError) as exc:
            raise Disconnected(str(exc)) from exc

    def _read_exact(self, n: int, *, at_boundary: bool) -> bytes:
        chunks = b""
        while len(chunks) < n:
            try:
                piece = self._stream.read(n - len(chunks))
            except (ValueError, OSError) as exc:
                raise Disconnected(str(exc)) from exc
            if not piece:
                if at_boundary and not chunks:
                    raise Disconnected("peer closed the stream")
                raise FrameCorrupt("stream ended mid-frame")
            chunks += piece
        return chunks

    def recv(self) -> Envelope:
        head = self._read_exact(8, at_boundary=True)
        (length,) = struct.unpack("<Q", head)
        if length < 1:
            raise FrameCorrupt("frame length must cover the kind tag")
        body = self._read_exact(length, at_boundary=False)
        try:
            kind = EnvelopeKind(body[0])
        except ValueError as exc:
            raise FrameCorrupt(f"unknown kind tag {body[0]}") from exc
        return decode_payload(kind, body[1:])

    def close(self) -> None:
        try:
            self._stream.close()
        except OSError:
            pass
