"""Binary message framing shared by every transport.

Frame layout: u32 length (of everything after it), u8 variant tag,
16-byte session id, u64 sequence number, then the variant payload.
Big integers travel as length-prefixed big-endian byte strings; bit
vectors pack eight per byte. In-process and socket transports emit
byte-identical frames, so byte counters agree between them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields

SESSION_ID_BYTES = 16

TAG_SETUP = 1
TAG_GUEST_VECTORS = 2
TAG_CHAIN_FORWARD = 3
TAG_HOST_AGGREGATE = 4
TAG_SPLIT_QUERY = 5
TAG_SPLIT_ANSWER = 6
TAG_END_SESSION = 7


class WireError(ValueError):
    """Malformed frame or payload."""


def int_to_bytes(value: int) -> bytes:
    value = int(value)
    if value < 0:
        raise WireError("wire integers must be non-negative")
    return value.to_bytes(max(1, (value.bit_length() + 7) // 8), "big")


def int_from_bytes(data: bytes) -> int:
    return int.from_bytes(data, "big")


def pack_bits(bits) -> bytes:
    """Pack a 0/1 sequence eight per byte, LSB first."""
    out = bytearray((len(bits) + 7) // 8)
    for i, bit in enumerate(bits):
        if bit:
            out[i >> 3] |= 1 << (i & 7)
    return bytes(out)


def unpack_bits(data: bytes, count: int) -> tuple[int, ...]:
    if len(data) < (count + 7) // 8:
        raise WireError(f"bit vector truncated: {len(data)} bytes for {count} bits")
    return tuple((data[i >> 3] >> (i & 7)) & 1 for i in range(count))


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v):
        self.parts.append(struct.pack(">B", v))

    def u16(self, v):
        self.parts.append(struct.pack(">H", v))

    def u32(self, v):
        self.parts.append(struct.pack(">I", v))

    def u64(self, v):
        self.parts.append(struct.pack(">Q", v))

    def raw(self, b: bytes):
        self.parts.append(b)

    def blob(self, b: bytes):
        self.u32(len(b))
        self.raw(b)

    def bigint(self, v: int):
        self.blob(int_to_bytes(v))

    def text(self, s: str):
        self.blob(s.encode("utf-8"))

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def _take(self, size: int) -> bytes:
        if self.pos + size > len(self.data):
            raise WireError("payload truncated")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def blob(self) -> bytes:
        return self._take(self.u32())

    def bigint(self) -> int:
        return int_from_bytes(self.blob())

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def done(self) -> bool:
        return self.pos == len(self.data)


@dataclass(frozen=True)
class Setup:
    session_id: bytes
    seq: int
    model_version: str
    public_key_fields: dict

    TAG = TAG_SETUP

    def encode_payload(self, w: _Writer) -> None:
        w.text(self.model_version)
        w.text(json.dumps(self.public_key_fields, sort_keys=True))

    @classmethod
    def decode_payload(cls, session_id, seq, r: _Reader):
        return cls(session_id, seq, r.text(), json.loads(r.text()))


def _encode_vector_block(w: _Writer, sample_ids, tree_ids, vectors) -> None:
    w.u32(len(sample_ids))
    for sid in sample_ids:
        w.u32(sid)
    w.u32(len(tree_ids))
    for tid in tree_ids:
        w.u32(tid)
    for per_tree in vectors:
        if len(per_tree) != len(tree_ids):
            raise WireError("one entry vector required per tree")
        for entries in per_tree:
            w.u16(len(entries))
            for value in entries:
                w.bigint(value)


def _decode_vector_block(r: _Reader):
    sample_ids = tuple(r.u32() for _ in range(r.u32()))
    tree_ids = tuple(r.u32() for _ in range(r.u32()))
    vectors = tuple(
        tuple(tuple(r.bigint() for _ in range(r.u16())) for _ in tree_ids)
        for _ in sample_ids
    )
    return sample_ids, tree_ids, vectors


@dataclass(frozen=True)
class GuestVectors:
    """Per-sample, per-tree encrypted decision vectors from the guest."""

    session_id: bytes
    seq: int
    sample_ids: tuple[int, ...]
    tree_ids: tuple[int, ...]
    vectors: tuple[tuple[tuple[int, ...], ...], ...]

    TAG = TAG_GUEST_VECTORS

    def encode_payload(self, w: _Writer) -> None:
        _encode_vector_block(w, self.sample_ids, self.tree_ids, self.vectors)

    @classmethod
    def decode_payload(cls, session_id, seq, r: _Reader):
        return cls(session_id, seq, *_decode_vector_block(r))


@dataclass(frozen=True)
class ChainForward:
    """Filtered, rerandomized vectors relayed between hosts in a chain."""

    session_id: bytes
    seq: int
    sample_ids: tuple[int, ...]
    tree_ids: tuple[int, ...]
    vectors: tuple[tuple[tuple[int, ...], ...], ...]

    TAG = TAG_CHAIN_FORWARD

    def encode_payload(self, w: _Writer) -> None:
        _encode_vector_block(w, self.sample_ids, self.tree_ids, self.vectors)

    @classmethod
    def decode_payload(cls, session_id, seq, r: _Reader):
        return cls(session_id, seq, *_decode_vector_block(r))


@dataclass(frozen=True)
class HostAggregate:
    """Per-sample encrypted margin sums, the sole host-to-guest payload."""

    session_id: bytes
    seq: int
    sample_ids: tuple[int, ...]
    values: tuple[int, ...]

    TAG = TAG_HOST_AGGREGATE

    def encode_payload(self, w: _Writer) -> None:
        if len(self.sample_ids) != len(self.values):
            raise WireError("one aggregate per sample id required")
        w.u32(len(self.sample_ids))
        for sid, value in zip(self.sample_ids, self.values):
            w.u32(sid)
            w.bigint(value)

    @classmethod
    def decode_payload(cls, session_id, seq, r: _Reader):
        count = r.u32()
        pairs = [(r.u32(), r.bigint()) for _ in range(count)]
        return cls(session_id, seq,
                   tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))


@dataclass(frozen=True)
class SplitQuery:
    session_id: bytes
    seq: int
    tree_id: int
    node_id: int
    sample_id: int

    TAG = TAG_SPLIT_QUERY

    def encode_payload(self, w: _Writer) -> None:
        w.u32(self.tree_id)
        w.u32(self.node_id)
        w.u32(self.sample_id)

    @classmethod
    def decode_payload(cls, session_id, seq, r: _Reader):
        return cls(session_id, seq, r.u32(), r.u32(), r.u32())


@dataclass(frozen=True)
class SplitAnswer:
    session_id: bytes
    seq: int
    go_left: int

    TAG = TAG_SPLIT_ANSWER

    def encode_payload(self, w: _Writer) -> None:
        w.raw(pack_bits((self.go_left,)))

    @classmethod
    def decode_payload(cls, session_id, seq, r: _Reader):
        return cls(session_id, seq, unpack_bits(r._take(1), 1)[0])


@dataclass(frozen=True)
class EndSession:
    session_id: bytes
    seq: int

    TAG = TAG_END_SESSION

    def encode_payload(self, w: _Writer) -> None:
        pass

    @classmethod
    def decode_payload(cls, session_id, seq, r: _Reader):
        return cls(session_id, seq)


MESSAGE_TYPES = (Setup, GuestVectors, ChainForward, HostAggregate,
                 SplitQuery, SplitAnswer, EndSession)
_BY_TAG = {cls.TAG: cls for cls in MESSAGE_TYPES}
TAG_NAMES = {cls.TAG: cls.__name__ for cls in MESSAGE_TYPES}

Message = Setup | GuestVectors | ChainForward | HostAggregate | SplitQuery | SplitAnswer | EndSession


def encode_message(message: Message) -> bytes:
    if len(message.session_id) != SESSION_ID_BYTES:
        raise WireError(f"session id must be {SESSION_ID_BYTES} bytes")
    w = _Writer()
    message.encode_payload(w)
    payload = w.getvalue()
    body = struct.pack(">B", message.TAG) + message.session_id \
        + struct.pack(">Q", message.seq) + payload
    return struct.pack(">I", len(body)) + body


def frame_tag(frame: bytes) -> int:
    if len(frame) < 5:
        raise WireError("frame too short")
    return frame[4]


def decode_message(frame: bytes) -> Message:
    if len(frame) < 4 + 1 + SESSION_ID_BYTES + 8:
        raise WireError("frame too short")
    (length,) = struct.unpack(">I", frame[:4])
    if length != len(frame) - 4:
        raise WireError(f"frame length {length} does not match {len(frame) - 4} body bytes")
    tag = frame[4]
    session_id = frame[5:5 + SESSION_ID_BYTES]
    (seq,) = struct.unpack(">Q", frame[5 + SESSION_ID_BYTES:13 + SESSION_ID_BYTES])
    cls = _BY_TAG.get(tag)
    if cls is None:
        raise WireError(f"unknown message tag {tag}")
    reader = _Reader(frame[13 + SESSION_ID_BYTES:])
    message = cls.decode_payload(session_id, seq, reader)
    if not reader.done():
        raise WireError(f"{cls.__name__}: {len(reader.data) - reader.pos} trailing bytes")
    return message
