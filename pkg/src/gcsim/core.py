"""Shared domain types and the frame codec.

Everything here is a plain value type: safe to copy, compare and ship
between node event loops.  The binary frame layout is documented in
FORMAT.md at the repository root.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum, auto
from typing import Any, Optional

# A node identity is a plain non-negative integer, stable across recovery.
NodeId = int

# Destination sentinel for multicast messages.
MULTICAST: Optional[int] = None

_MULTICAST_WIRE = 0xFFFFFFFFFFFFFFFF


class GcsimError(Exception):
    """Base class for all framework errors."""


class CorruptFrameError(GcsimError):
    """Raised when a frame fails checksum or structural validation."""


@dataclass(frozen=True, order=True)
class ViewId:
    """Monotonic view identifier, totally ordered by (counter, coordinator)."""

    counter: int
    coordinator: NodeId

    def __post_init__(self):
        if self.counter < 0 or self.coordinator < 0:
            raise ValueError("ViewId fields must be non-negative")


@dataclass(frozen=True)
class View:
    """An agreed membership snapshot. The coordinator is the first member."""

    id: ViewId
    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        object.__setattr__(self, "members", members)
        if not members:
            raise ValueError("view members must be non-empty")
        if len(set(members)) != len(members):
            raise ValueError("duplicate members in view")
        if members[0] != self.id.coordinator:
            raise ValueError("coordinator must be the first member")

    @property
    def coordinator(self) -> NodeId:
        return self.members[0]

    def __contains__(self, node: NodeId) -> bool:
        return node in self.members


class MessageFlag(Enum):
    OOB = 1
    INTERNAL = 2


@dataclass
class Message:
    """Addressed payload with a per-layer header map.

    ``dest`` is a node id for unicast or ``MULTICAST`` (None). Each layer
    adds its header exactly once on the way down and removes it exactly
    once on the way up.
    """

    src: NodeId
    dest: Optional[NodeId]
    payload: bytes = b""
    headers: dict = field(default_factory=dict)
    flags: frozenset = frozenset()

    def copy(self) -> "Message":
        return Message(self.src, self.dest, self.payload,
                       dict(self.headers), self.flags)

    def is_multicast(self) -> bool:
        return self.dest is None

    def size(self) -> int:
        return len(self.payload)


class EventKind(Enum):
    MSG_UP = auto()
    MSG_DOWN = auto()
    VIEW_CHANGE = auto()
    SUSPECT = auto()
    UNSUSPECT = auto()
    MERGE = auto()
    TIMER = auto()
    CONFIG_CHANGED = auto()
    STATE_TRANSFER = auto()
    EXCLUDED = auto()


@dataclass
class StackEvent:
    """Event exchanged between protocol layers.

    ``body`` depends on the kind: a Message for MSG_UP/MSG_DOWN, a View for
    VIEW_CHANGE, a NodeId for SUSPECT/UNSUSPECT, a list of sub-Views for
    MERGE, a (path, value) pair for CONFIG_CHANGED.
    """

    kind: EventKind
    body: Any = None

    @staticmethod
    def msg_up(m: Message) -> "StackEvent":
        return StackEvent(EventKind.MSG_UP, m)

    @staticmethod
    def msg_down(m: Message) -> "StackEvent":
        return StackEvent(EventKind.MSG_DOWN, m)

    @staticmethod
    def view_change(v: View) -> "StackEvent":
        return StackEvent(EventKind.VIEW_CHANGE, v)


_FLAG_BITS = {MessageFlag.OOB: 0x01, MessageFlag.INTERNAL: 0x02}


def _flags_to_byte(flags) -> int:
    b = 0
    for f in flags:
        b |= _FLAG_BITS[f]
    return b


def _byte_to_flags(b: int) -> frozenset:
    return frozenset(f for f, bit in _FLAG_BITS.items() if b & bit)


def encode_message(m: Message) -> bytes:
    """Encode a message into a self-delimiting, checksummed frame.

    Deterministic: header entries are written in name order, so equal
    messages always produce identical bytes.
    """
    parts = [struct.pack("<QQ", m.src,
                         _MULTICAST_WIRE if m.dest is None else m.dest)]
    parts.append(struct.pack("<B", _flags_to_byte(m.flags)))
    parts.append(struct.pack("<I", len(m.payload)))
    parts.append(bytes(m.payload))
    names = sorted(m.headers)
    parts.append(struct.pack("<H", len(names)))
    for name in names:
        nb = name.encode("utf-8")
        value = bytes(m.headers[name])
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", len(value)))
        parts.append(value)
    body = b"".join(parts)
    return struct.pack("<I", zlib.crc32(body)) + body


def decode_message(b: bytes) -> Message:
    """Decode a frame produced by :func:`encode_message`.

    Raises CorruptFrameError on checksum mismatch or any structural
    damage (truncation, trailing bytes, bad lengths).
    """
    try:
        if len(b) < 4:
            raise CorruptFrameError("frame too short")
        (crc,) = struct.unpack_from("<I", b, 0)
        body = b[4:]
        if zlib.crc32(body) != crc:
            raise CorruptFrameError("checksum mismatch")
        off = 0
        src, dest_raw = struct.unpack_from("<QQ", body, off)
        off += 16
        (flag_byte,) = struct.unpack_from("<B", body, off)
        off += 1
        (paylen,) = struct.unpack_from("<I", body, off)
        off += 4
        if off + paylen > len(body):
            raise CorruptFrameError("payload truncated")
        payload = body[off:off + paylen]
        off += paylen
        (nheaders,) = struct.unpack_from("<H", body, off)
        off += 2
        headers = {}
        for _ in range(nheaders):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            (vlen,) = struct.unpack_from("<I", body, off)
            off += 4
            headers[name] = body[off:off + vlen]
            off += vlen
        if off != len(body):
            raise CorruptFrameError("trailing bytes in frame")
        dest = None if dest_raw == _MULTICAST_WIRE else dest_raw
        return Message(src, dest, payload, headers, _byte_to_flags(flag_byte))
    except CorruptFrameError:
        raise
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptFrameError(str(exc)) from exc


def frame_overhead(m: Message) -> int:
    """Bytes the frame adds on top of the raw payload."""
    fixed = 4 + 8 + 8 + 1 + 4 + 2
    per_header = sum(2 + len(n.encode("utf-8")) + 4 + len(v)
                     for n, v in m.headers.items())
    return fixed + per_header
