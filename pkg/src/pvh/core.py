"""
PVH wire formats.

Data plane packet (all integers big-endian)::

    +-----+---------+---------+----------+----------+-----------+-----------+---------+
    | tag | hdr_len | tot_len | src_addr | dst_addr | path vec. | [revpath] | payload |
    |  1  |    1    |    2    |    6     |    6     |  >= 1     |           |         |
    +-----+---------+---------+----------+----------+-----------+-----------+---------+

The path vector is a run of signed one-byte hop entries closed by a zero
terminator.  A positive entry ``n`` means "send out of NIC n with a broadcast
destination MAC"; a negative entry ``-n`` is followed by the six octets of the
destination MAC to use on a shared medium.  Forwarding shifts the consumed
entry out and zero-fills the end of the path-vector region, so ``hdr_len`` is
constant in transit.

When tag bit 0x80 is set the header carries a reverse-path section after the
path-vector region: one count octet (wire size of the entries) followed by
path entries, without a terminator.

Control frames::

    +----------+--------+----------+---------------------------+
    | codec_id | length | msg_type | TLV (tag:1, len:2, value) |...
    |    2     |   2    |    1     |                           |
    +----------+--------+----------+---------------------------+

``length`` counts the bytes after the 4-byte prefix, so Ethernet minimum-frame
zero padding can be stripped on decode.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator, Optional, Sequence

from .errors import (
    InvalidHeader,
    MalformedPathVector,
    Oversize,
    Truncated,
    UnknownCodec,
    UnknownMessageType,
)

ETHERTYPE_DATA = 0x88B5
ETHERTYPE_CONTROL = 0x88B6

BROADCAST_MAC = b"\xff" * 6
ADDR_LEN = 6
FIXED_HEADER_LEN = 16
MIN_HEADER_LEN = FIXED_HEADER_LEN + 1
MAX_HEADER_LEN = 255
MAX_PV_WIRE_LEN = 239
MAX_TOTAL_LEN = 0xFFFF
REV_FLAG = 0x80

CODEC_TLV_V1 = 0x0001
CONTROL_PREFIX_LEN = 4

_FIXED = struct.Struct("!BBH6s6s")
_CTRL_PREFIX = struct.Struct("!HH")
_TLV_HDR = struct.Struct("!BH")


class PacketKind(IntEnum):
    RAW = 0x00
    IP = 0x01
    ECHO_REQUEST = 0x02
    ECHO_REPLY = 0x03


_KINDS = frozenset(int(k) for k in PacketKind)


def fmt_addr(addr: bytes) -> str:
    return ":".join(f"{b:02x}" for b in addr)


def parse_addr(text: str) -> bytes:
    parts = text.split(":")
    if len(parts) != ADDR_LEN:
        raise ValueError(f"not a 6-octet address: {text!r}")
    return bytes(int(p, 16) for p in parts)


def check_addr(addr: bytes, what: str = "address") -> bytes:
    """Validate a host address (6 octets, not broadcast)."""
    if not isinstance(addr, (bytes, bytearray)) or len(addr) != ADDR_LEN:
        raise InvalidHeader(f"{what} must be exactly 6 octets")
    if addr == BROADCAST_MAC:
        raise InvalidHeader(f"{what} may not be the broadcast address")
    return bytes(addr)


# ---------------------------------------------------------------------------
# Path entries and vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PathEntry:
    """One hop instruction.  ``nic == 0`` is the terminator."""

    nic: int
    dmac: Optional[bytes] = None

    def __post_init__(self):
        if self.nic == 0:
            if self.dmac is not None:
                raise ValueError("terminator carries no MAC")
        elif not 1 <= self.nic <= 127:
            raise ValueError(f"NIC id out of range 1..127: {self.nic}")
        if self.dmac is not None and len(self.dmac) != 6:
            raise ValueError("dmac must be 6 octets")

    @property
    def is_terminator(self) -> bool:
        return self.nic == 0

    @property
    def is_shared(self) -> bool:
        return self.dmac is not None

    @property
    def wire_size(self) -> int:
        return 7 if self.dmac is not None else 1

    def to_bytes(self) -> bytes:
        if self.dmac is not None:
            return bytes((256 - self.nic,)) + self.dmac
        return bytes((self.nic,))

    def __repr__(self):
        if self.nic == 0:
            return "Term"
        if self.dmac is not None:
            return f"Shared({self.nic},{fmt_addr(self.dmac)})"
        return f"P2P({self.nic})"


TERMINATOR = PathEntry(0)


def p2p(nic: int) -> PathEntry:
    if nic == 0:
        raise ValueError("point-to-point entry needs a non-zero NIC id")
    return PathEntry(nic)


def shared(nic: int, dmac: bytes) -> PathEntry:
    if nic == 0:
        raise ValueError("shared-medium entry needs a non-zero NIC id")
    return PathEntry(nic, bytes(dmac))


def entries_wire_len(entries: Iterable[PathEntry]) -> int:
    return sum(e.wire_size for e in entries)


def iter_entries(buf: bytes, pos: int, end: int) -> Iterator[tuple[PathEntry, int]]:
    """Yield ``(entry, next_pos)`` pairs from ``buf[pos:end]``.

    Stops after yielding a terminator.  Raises MalformedPathVector when a
    shared-medium entry's MAC runs past ``end``.
    """
    while pos < end:
        b = buf[pos]
        if b == 0:
            yield TERMINATOR, pos + 1
            return
        if b < 0x80:
            pos += 1
            yield PathEntry(b), pos
        else:
            if b == 0x80:
                raise MalformedPathVector(f"entry -128 at offset {pos} names no valid NIC")
            if pos + 7 > end:
                raise MalformedPathVector(f"shared-medium MAC overruns region at offset {pos}")
            yield PathEntry(256 - b, bytes(buf[pos + 1:pos + 7])), pos + 7
            pos += 7


@dataclass(frozen=True)
class PathVector:
    """Source route: hop entries followed by exactly one terminator."""

    entries: tuple[PathEntry, ...] = (TERMINATOR,)

    def __post_init__(self):
        ents = tuple(self.entries)
        object.__setattr__(self, "entries", ents)
        if not ents or not ents[-1].is_terminator:
            raise MalformedPathVector("path vector must end with a terminator")
        if any(e.is_terminator for e in ents[:-1]):
            raise MalformedPathVector("terminator before end of path vector")

    @classmethod
    def from_hops(cls, hops: Iterable[PathEntry]) -> "PathVector":
        return cls(tuple(hops) + (TERMINATOR,))

    @classmethod
    def from_ints(cls, values: Sequence[int]) -> "PathVector":
        """Build from a list of point-to-point NIC ids, e.g. ``[2, 2, 3, 0]``."""
        vals = list(values)
        if vals and vals[-1] == 0:
            vals = vals[:-1]
        return cls.from_hops(p2p(v) for v in vals)

    @classmethod
    def parse(cls, buf: bytes, pos: int = 0, end: Optional[int] = None) -> tuple["PathVector", int]:
        """Parse a path vector starting at ``pos``; return it and the offset after the terminator."""
        end = len(buf) if end is None else end
        out = []
        for entry, nxt in iter_entries(buf, pos, end):
            out.append(entry)
            if entry.is_terminator:
                return cls(tuple(out)), nxt
        raise MalformedPathVector("no terminator within path-vector region")

    @property
    def hops(self) -> tuple[PathEntry, ...]:
        return self.entries[:-1]

    @property
    def hop_count(self) -> int:
        return len(self.entries) - 1

    @property
    def wire_len(self) -> int:
        return entries_wire_len(self.entries)

    def to_bytes(self) -> bytes:
        return b"".join(e.to_bytes() for e in self.entries)

    def concat(self, other: "PathVector") -> "PathVector":
        return PathVector.from_hops(self.hops + other.hops)

    def __repr__(self):
        return f"PathVector({list(self.entries)!r})"


# ---------------------------------------------------------------------------
# Data-plane packets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PvhPacket:
    """A decoded PVH packet.

    ``pv_fill`` counts the zero octets left behind the terminator by
    forwarding; ``rev`` is None when the reverse-path extension is absent.
    """

    kind: int
    src: bytes
    dst: bytes
    pv: PathVector = field(default_factory=PathVector)
    payload: bytes = b""
    rev: Optional[tuple[PathEntry, ...]] = None
    pv_fill: int = 0

    @property
    def tag(self) -> int:
        return self.kind | (REV_FLAG if self.rev is not None else 0)

    @property
    def rev_section_len(self) -> int:
        if self.rev is None:
            return 0
        return 1 + entries_wire_len(self.rev)

    @property
    def hdr_len(self) -> int:
        return FIXED_HEADER_LEN + self.pv.wire_len + self.pv_fill + self.rev_section_len

    @property
    def tot_len(self) -> int:
        return self.hdr_len + len(self.payload)


def encode_pvh(packet: PvhPacket) -> bytes:
    """Serialize a packet; the result is exactly ``tot_len`` octets."""
    if packet.kind not in _KINDS:
        raise InvalidHeader(f"unknown packet kind {packet.kind:#x}")
    check_addr(packet.src, "src_addr")
    check_addr(packet.dst, "dst_addr")
    if packet.pv_fill < 0:
        raise InvalidHeader("negative path-vector fill")
    if packet.pv.wire_len + packet.pv_fill > MAX_PV_WIRE_LEN:
        raise InvalidHeader("path vector longer than 239 octets")
    if packet.rev is not None and any(e.is_terminator for e in packet.rev):
        raise InvalidHeader("reverse path may not contain a terminator")
    hdr_len = packet.hdr_len
    if hdr_len > MAX_HEADER_LEN:
        raise InvalidHeader(f"hdr_len {hdr_len} does not fit one octet")
    tot_len = hdr_len + len(packet.payload)
    if tot_len > MAX_TOTAL_LEN:
        raise Oversize(f"tot_len {tot_len} exceeds 65535")
    parts = [
        _FIXED.pack(packet.tag, hdr_len, tot_len, packet.src, packet.dst),
        packet.pv.to_bytes(),
        bytes(packet.pv_fill),
    ]
    if packet.rev is not None:
        rev = b"".join(e.to_bytes() for e in packet.rev)
        parts.append(bytes((len(rev),)))
        parts.append(rev)
    parts.append(packet.payload)
    return b"".join(parts)


def decode_pvh(buf: bytes) -> PvhPacket:
    """Parse a PVH packet.  Octets past ``tot_len`` (link padding) are ignored."""
    if len(buf) < MIN_HEADER_LEN:
        raise Truncated(f"{len(buf)} octets is shorter than the 17-octet minimum")
    tag, hdr_len, tot_len, src, dst = _FIXED.unpack_from(buf, 0)
    if hdr_len < FIXED_HEADER_LEN or tot_len < hdr_len:
        raise InvalidHeader(f"inconsistent lengths hdr_len={hdr_len} tot_len={tot_len}")
    if len(buf) < tot_len:
        raise Truncated(f"have {len(buf)} octets, tot_len says {tot_len}")
    kind = tag & 0x7F
    if kind not in _KINDS:
        raise InvalidHeader(f"unknown packet kind {kind:#x}")
    if src == BROADCAST_MAC or dst == BROADCAST_MAC:
        raise InvalidHeader("broadcast host address")

    pv, pos = PathVector.parse(buf, FIXED_HEADER_LEN, hdr_len)
    rev = None
    if tag & REV_FLAG:
        count_at = pos
        while count_at < hdr_len and buf[count_at] == 0:
            count_at += 1
        if count_at == hdr_len:
            # all zeros: empty reverse path, count octet is the last one
            count_at = hdr_len - 1
            if count_at < pos:
                raise MalformedPathVector("no room for reverse-path count")
        count = buf[count_at]
        if count_at + 1 + count != hdr_len:
            raise MalformedPathVector("reverse-path count disagrees with hdr_len")
        rev_entries = []
        for entry, _ in iter_entries(buf, count_at + 1, hdr_len):
            if entry.is_terminator:
                raise MalformedPathVector("terminator inside reverse path")
            rev_entries.append(entry)
        rev = tuple(rev_entries)
        fill = count_at - pos
    else:
        if any(buf[pos:hdr_len]):
            raise MalformedPathVector("non-zero octets after terminator")
        fill = hdr_len - pos
    return PvhPacket(
        kind=kind,
        src=bytes(src),
        dst=bytes(dst),
        pv=pv,
        payload=bytes(buf[hdr_len:tot_len]),
        rev=rev,
        pv_fill=fill,
    )


# ---------------------------------------------------------------------------
# Control plane
# ---------------------------------------------------------------------------


class MsgType(IntEnum):
    CAP_BCAST = 0x01
    HEAD_DECL = 0x02
    JOIN_REQ = 0x03
    JOIN_ACK = 0x04
    SCAN_REQ = 0x05
    SCAN_REP = 0x06
    HELLO = 0x07
    NBR_UPLOAD = 0x08
    ROUTE_REQ = 0x09
    ROUTE_REP = 0x0A
    PROBE_REQ = 0x0B
    PROBE_REP = 0x0C
    SVC_REG = 0x0D
    SVC_PUSH = 0x0E
    SVC_QUERY = 0x0F
    SVC_REP = 0x10


class Tlv(IntEnum):
    ADDR = 0x01          # 6: originator / requester / provider
    CAPABILITY = 0x02    # 8: IEEE-754 double
    HOP_LIMIT = 0x03     # 1
    REV_PATH = 0x04      # path entries, no terminator
    PATH_VECTOR = 0x05   # path entries incl. terminator
    HEAD = 0x06          # 6
    TARGET = 0x07        # 6
    REQUEST_ID = 0x08    # 4
    NEIGHBOR = 0x09      # 7 or 13: addr, nic, [dmac]
    SERVICE = 0x0A       # utf-8 name, <= 64 octets
    STATUS = 0x0B        # 1
    JOIN_ROUND = 0x0C    # 2
    DISTANCE = 0x0D      # 1
    SEQ = 0x0E           # 4


class Status(IntEnum):
    OK = 0
    NOT_IN_CLUSTER = 1
    NOT_FOUND = 2


_KNOWN_TLVS = frozenset(int(t) for t in Tlv)


@dataclass(frozen=True)
class ControlMessage:
    msg_type: MsgType
    tlvs: tuple[tuple[int, bytes], ...] = ()

    @classmethod
    def build(cls, msg_type: MsgType, *fields: tuple[int, bytes]) -> "ControlMessage":
        return cls(MsgType(msg_type), tuple((int(t), bytes(v)) for t, v in fields))

    def get(self, tag: int) -> Optional[bytes]:
        for t, v in self.tlvs:
            if t == tag:
                return v
        return None

    def get_all(self, tag: int) -> list[bytes]:
        return [v for t, v in self.tlvs if t == tag]

    def require(self, tag: int) -> bytes:
        v = self.get(tag)
        if v is None:
            raise KeyError(f"{self.msg_type.name} lacks TLV {Tlv(tag).name}")
        return v

    # typed accessors
    def u8(self, tag: int) -> int:
        return self.require(tag)[0]

    def u16(self, tag: int) -> int:
        return struct.unpack("!H", self.require(tag))[0]

    def u32(self, tag: int) -> int:
        return struct.unpack("!I", self.require(tag))[0]

    def f64(self, tag: int) -> float:
        return struct.unpack("!d", self.require(tag))[0]

    def text(self, tag: int) -> str:
        return self.require(tag).decode("utf-8")

    def entries(self, tag: int) -> tuple[PathEntry, ...]:
        raw = self.get(tag) or b""
        return tuple(e for e, _ in iter_entries(raw, 0, len(raw)) if not e.is_terminator)

    def path_vector(self, tag: int = Tlv.PATH_VECTOR) -> PathVector:
        raw = self.require(tag)
        pv, _ = PathVector.parse(raw)
        return pv


def u8(v: int) -> bytes:
    return struct.pack("!B", v)


def u16(v: int) -> bytes:
    return struct.pack("!H", v)


def u32(v: int) -> bytes:
    return struct.pack("!I", v)


def f64(v: float) -> bytes:
    return struct.pack("!d", v)


def entries_bytes(entries: Iterable[PathEntry]) -> bytes:
    return b"".join(e.to_bytes() for e in entries)


def encode_control(msg: ControlMessage) -> bytes:
    body = [bytes((int(msg.msg_type),))]
    for tag, value in msg.tlvs:
        if len(value) > 0xFFFF:
            raise Oversize(f"TLV {tag} value of {len(value)} octets")
        body.append(_TLV_HDR.pack(tag, len(value)))
        body.append(value)
    payload = b"".join(body)
    if len(payload) > 0xFFFF:
        raise Oversize(f"control payload of {len(payload)} octets")
    return _CTRL_PREFIX.pack(CODEC_TLV_V1, len(payload)) + payload


def decode_control(buf: bytes) -> ControlMessage:
    if len(buf) < CONTROL_PREFIX_LEN:
        raise Truncated("control frame shorter than its 4-octet prefix")
    codec, length = _CTRL_PREFIX.unpack_from(buf, 0)
    if codec != CODEC_TLV_V1:
        raise UnknownCodec(f"codec id {codec:#06x}")
    end = CONTROL_PREFIX_LEN + length
    if len(buf) < end or length < 1:
        raise Truncated(f"control length {length} but {len(buf) - CONTROL_PREFIX_LEN} octets present")
    try:
        msg_type = MsgType(buf[CONTROL_PREFIX_LEN])
    except ValueError:
        raise UnknownMessageType(f"message type {buf[CONTROL_PREFIX_LEN]:#04x}") from None
    pos = CONTROL_PREFIX_LEN + 1
    tlvs = []
    while pos < end:
        if pos + _TLV_HDR.size > end:
            raise Truncated("TLV header cut short")
        tag, vlen = _TLV_HDR.unpack_from(buf, pos)
        pos += _TLV_HDR.size
        if pos + vlen > end:
            raise Truncated(f"TLV {tag} value overruns frame")
        if tag in _KNOWN_TLVS:
            tlvs.append((tag, bytes(buf[pos:pos + vlen])))
        pos += vlen
    return ControlMessage(msg_type, tuple(tlvs))
