"""IP-over-PVH encapsulation.

The OS side (a tun device handing raw IP packets to the stack and accepting
decapsulated ones back) is not implemented here.  Anything with the
:class:`PacketEndpoint` shape can stand in for it; the simulator uses
:class:`MemoryEndpoint`.
"""

from __future__ import annotations

import ipaddress
from collections import deque
from typing import Optional, Protocol

from .core import MAX_TOTAL_LEN, PacketKind, PathVector, PvhPacket, check_addr
from .errors import NotDelivered, NotIpv4, Oversize, WrongTag

IPV4_MIN_HEADER = 20


def encap_ip(ip_packet: bytes, src: bytes, dst: bytes, pv: PathVector) -> PvhPacket:
    if not ip_packet or ip_packet[0] >> 4 != 4:
        raise NotIpv4("payload is not an IPv4 datagram")
    packet = PvhPacket(PacketKind.IP, check_addr(src), check_addr(dst), pv, bytes(ip_packet))
    if packet.tot_len > MAX_TOTAL_LEN:
        raise Oversize(f"tot_len {packet.tot_len} exceeds 65535")
    return packet


def decap_ip(packet: PvhPacket) -> bytes:
    if packet.kind != PacketKind.IP:
        raise WrongTag(f"tag {packet.kind:#04x} is not IP-over-PVH")
    if not packet.pv.entries[0].is_terminator:
        raise NotDelivered("path vector not exhausted")
    return packet.payload


class IpMapping:
    """Static /32 map from IPv4 destination to PVH host address."""

    def __init__(self, entries: Optional[dict] = None):
        self._map: dict[bytes, bytes] = {}
        for ip, addr in (entries or {}).items():
            self.add(ip, addr)

    def add(self, ip, addr: bytes) -> None:
        key = ipaddress.IPv4Address(ip).packed
        if key in self._map and self._map[key] != addr:
            raise ValueError(f"{ipaddress.IPv4Address(key)} already mapped")
        self._map[key] = check_addr(addr)

    def lookup_ip(self, ip) -> Optional[bytes]:
        return self._map.get(ipaddress.IPv4Address(ip).packed)

    def lookup(self, ip_packet: bytes) -> Optional[bytes]:
        """Host address for the datagram's destination, if mapped."""
        if len(ip_packet) < IPV4_MIN_HEADER:
            return None
        return self._map.get(bytes(ip_packet[16:20]))

    def __len__(self):
        return len(self._map)


class PacketEndpoint(Protocol):
    """Byte-stream endpoint: raw IP packets in, decapsulated IP packets out."""

    def read(self) -> Optional[bytes]: ...

    def write(self, ip_packet: bytes) -> None: ...


class MemoryEndpoint:
    def __init__(self):
        self.outbound: deque[bytes] = deque()
        self.received: list[bytes] = []

    def read(self) -> Optional[bytes]:
        return self.outbound.popleft() if self.outbound else None

    def write(self, ip_packet: bytes) -> None:
        self.received.append(ip_packet)
