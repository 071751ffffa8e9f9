"""Per-hop source-route forwarding and reverse-path bookkeeping.

Nothing here keeps per-node routing state: a forwarding decision is a
function of the packet and the set of NIC ids the node owns.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Container, Iterable, Optional, Union

from .core import (
    BROADCAST_MAC,
    MAX_HEADER_LEN,
    PathEntry,
    PathVector,
    PvhPacket,
    entries_wire_len,
    p2p,
    shared,
)
from .errors import RevPathOverflow

MAX_REV_WIRE_LEN = 200


class LinkKind(str, Enum):
    P2P = "p2p"
    SHARED = "shared"


class DropReason(str, Enum):
    MALFORMED_PV = "MalformedPathVector"
    NO_SUCH_NIC = "NoSuchNic"
    WRONG_DESTINATION = "WrongDestination"
    REV_PATH_OVERFLOW = "RevPathOverflow"


@dataclass(frozen=True)
class Deliver:
    packet: PvhPacket


@dataclass(frozen=True)
class Emit:
    nic: int
    dmac: bytes
    packet: PvhPacket


@dataclass(frozen=True)
class Drop:
    reason: DropReason


ForwardAction = Union[Deliver, Emit, Drop]


def forward_step(packet: PvhPacket, nics: Container[int], own_addr: Optional[bytes] = None) -> ForwardAction:
    """Decide what a node does with ``packet``.

    A leading terminator means the packet has arrived (checked against
    ``own_addr`` when given).  Otherwise the leading entry is popped, the
    path-vector region is zero-filled at its end by the popped entry's wire
    size, and the packet is emitted on the named NIC.
    """
    lead = packet.pv.entries[0]
    if lead.is_terminator:
        if own_addr is not None and packet.dst != own_addr:
            return Drop(DropReason.WRONG_DESTINATION)
        return Deliver(packet)
    if lead.nic not in nics:
        return Drop(DropReason.NO_SUCH_NIC)
    shifted = dataclasses.replace(
        packet,
        pv=PathVector(packet.pv.entries[1:]),
        pv_fill=packet.pv_fill + lead.wire_size,
    )
    dmac = lead.dmac if lead.dmac is not None else BROADCAST_MAC
    return Emit(lead.nic, dmac, shifted)


def rev_entry(rx_nic: int, rx_smac: Optional[bytes], link_kind: LinkKind) -> PathEntry:
    if LinkKind(link_kind) is LinkKind.SHARED:
        if rx_smac is None:
            raise ValueError("shared-medium receipt needs the source MAC")
        return shared(rx_nic, rx_smac)
    return p2p(rx_nic)


def record_reverse_hop(
    rev: Iterable[PathEntry],
    rx_nic: int,
    rx_smac: Optional[bytes],
    link_kind: LinkKind,
) -> tuple[PathEntry, ...]:
    """Append the receiving hop to a reverse path.

    Raises RevPathOverflow when the result would exceed 200 octets.
    """
    out = tuple(rev) + (rev_entry(rx_nic, rx_smac, link_kind),)
    if entries_wire_len(out) > MAX_REV_WIRE_LEN:
        raise RevPathOverflow(f"reverse path would grow to {entries_wire_len(out)} octets")
    return out


def record_on_packet(packet: PvhPacket, rx_nic: int, rx_smac: Optional[bytes], link_kind: LinkKind) -> PvhPacket:
    """Packet-level ``record_reverse_hop``: grows hdr_len and tot_len."""
    if packet.rev is None:
        return packet
    grown = dataclasses.replace(packet, rev=record_reverse_hop(packet.rev, rx_nic, rx_smac, link_kind))
    if grown.hdr_len > MAX_HEADER_LEN:
        raise RevPathOverflow(f"hdr_len would grow to {grown.hdr_len}")
    return grown


def reverse_to_pv(rev: Iterable[PathEntry]) -> PathVector:
    """Turn an accumulated reverse path into a source route back to its origin."""
    return PathVector.from_hops(reversed(tuple(rev)))
