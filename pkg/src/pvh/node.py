"""The per-node protocol agent driven by simulator events."""

from __future__ import annotations

import logging
import random
import struct
from dataclasses import dataclass
from typing import Callable, Optional

from .clustering import ClusteringMixin
from .config import ProtocolConfig
from .core import (
    BROADCAST_MAC,
    ETHERTYPE_CONTROL,
    ETHERTYPE_DATA,
    ControlMessage,
    MsgType,
    PacketKind,
    PathVector,
    PvhPacket,
    Tlv,
    decode_control,
    decode_pvh,
    encode_control,
    encode_pvh,
)
from .errors import PvhError, RevPathOverflow
from .forwarding import Deliver, Drop, Emit, LinkKind, forward_step, record_on_packet, record_reverse_hop, reverse_to_pv
from .routing import RoutingMixin, TopologyGraph
from .services import ServiceMixin
from .tunnel import IpMapping, MemoryEndpoint, decap_ip, encap_ip

log = logging.getLogger(__name__)

_ECHO = struct.Struct("!IIQ")  # session, seq, origin timestamp


@dataclass(frozen=True)
class NicInfo:
    nic_id: int
    kind: LinkKind
    mac: bytes


@dataclass(frozen=True)
class RxContext:
    nic: Optional[int]
    smac: Optional[bytes]
    link_kind: Optional[LinkKind]
    packet: Optional[PvhPacket] = None


@dataclass
class PingSample:
    src: str
    dst: str
    hop_count: int
    seq: int
    rtt_us: int
    first: bool


_HANDLERS = {
    MsgType.CAP_BCAST: "on_capability_broadcast",
    MsgType.HEAD_DECL: "on_head_declaration",
    MsgType.JOIN_REQ: "on_join_req",
    MsgType.JOIN_ACK: "on_join_ack",
    MsgType.SCAN_REQ: "on_scan_request",
    MsgType.SCAN_REP: "on_scan_reply",
    MsgType.HELLO: "on_hello",
    MsgType.NBR_UPLOAD: "on_neighbor_upload",
    MsgType.ROUTE_REQ: "on_route_req",
    MsgType.ROUTE_REP: "on_route_rep",
    MsgType.PROBE_REQ: "on_probe_req",
    MsgType.PROBE_REP: "on_probe_rep",
    MsgType.SVC_REG: "on_svc_reg",
    MsgType.SVC_PUSH: "on_svc_push",
    MsgType.SVC_QUERY: "on_svc_query",
    MsgType.SVC_REP: "on_svc_rep",
}


class PvhNode(ClusteringMixin, RoutingMixin, ServiceMixin):
    """Protocol state machine for one host.

    All work happens inside simulator callbacks; the node never touches
    another node's state, only the network's ``emit_frame``.
    """

    def __init__(self, name: str, addr: bytes, capability: float, nics: dict[int, NicInfo],
                 net, cfg: ProtocolConfig, seed: int = 0):
        self.name = name
        self.addr = addr
        self.capability = capability
        self.nics = nics
        self.net = net
        self.sim = net.sim
        self.metrics = net.metrics
        self.cfg = cfg
        self.rng = random.Random(f"{seed}:{name}")
        self._rid = self.rng.getrandbits(32)
        self.online = True
        self.topology = TopologyGraph()
        self.ip_map: Optional[IpMapping] = None
        self.tun = MemoryEndpoint()
        self._pings: dict[int, "PingSession"] = {}
        self._init_clustering()
        self._init_routing()
        self._init_services()

    def __repr__(self):
        return f"PvhNode({self.name}, {self.membership.role.value})"

    @property
    def now(self) -> int:
        return self.sim.now

    # -- plumbing -----------------------------------------------------------

    def count(self, key: str, n: int = 1) -> None:
        self.metrics.count(self.name, key, n)

    def after(self, delay: int, fn: Callable, *args) -> None:
        self.sim.schedule(delay, self._guarded, fn, args)

    def _guarded(self, fn, args):
        if self.online:
            fn(*args)

    def every(self, period: int, fn: Callable, first_delay: Optional[int] = None, *args) -> None:
        """Run ``fn`` every ``period``; ticks are skipped, not cancelled, while offline."""
        def tick():
            if self.online:
                fn(*args)
            self.sim.schedule(period, tick)
        self.sim.schedule(period if first_delay is None else first_delay, tick)

    def next_request_id(self) -> int:
        self._rid = (self._rid + 1) & 0xFFFFFFFF
        return self._rid

    def start(self) -> None:
        if self.cfg.clustering:
            self.start_cluster_init()

    def set_online(self, online: bool) -> None:
        self.online = online

    # -- transmit -------------------------------------------------------------

    def _emit(self, nic: int, dmac: bytes, ethertype: int, frame: bytes, ctrl_type: Optional[MsgType]) -> None:
        if ctrl_type is not None:
            self.count("ctrl_tx")
            self.count("ctrl_tx_bytes", len(frame))
            self.count(f"tx:{ctrl_type.name}")
        else:
            self.count("data_tx")
        self.net.emit_frame(self.name, nic, dmac, frame, ethertype)

    def broadcast_ctrl(self, msg: ControlMessage, exclude_nic: Optional[int] = None) -> None:
        frame = encode_control(msg)
        self.count(f"orig:{msg.msg_type.name}")
        for nic in sorted(self.nics):
            if nic != exclude_nic:
                self._emit(nic, BROADCAST_MAC, ETHERTYPE_CONTROL, frame, msg.msg_type)

    def send_ctrl(self, dst: bytes, pv: PathVector, msg: ControlMessage, with_rev: bool = False) -> None:
        """Carry a control message to ``dst`` along ``pv`` inside a raw PVH packet."""
        self.count(f"orig:{msg.msg_type.name}")
        packet = PvhPacket(PacketKind.RAW, self.addr, dst, pv, encode_control(msg),
                           rev=() if with_rev else None)
        self.send_packet(packet)

    def send_packet(self, packet: PvhPacket) -> None:
        self.after(self.cfg.proc_us, self._originate, packet)

    def _originate(self, packet: PvhPacket) -> None:
        action = forward_step(packet, self.nics, self.addr)
        if isinstance(action, Deliver):
            self._deliver(packet, RxContext(None, None, None, packet))
        elif isinstance(action, Emit):
            self.after(self.cfg.host_us, self._emit_packet, action)
        else:
            self.count(f"drop:{action.reason.value}")

    def _emit_packet(self, action: Emit) -> None:
        try:
            frame = encode_pvh(action.packet)
        except PvhError as exc:
            self.count("drop:encode")
            log.debug("%s: cannot encode packet: %s", self.name, exc)
            return
        self._emit(action.nic, action.dmac, ETHERTYPE_DATA, frame, _ctrl_type_of(action.packet))

    # -- receive --------------------------------------------------------------

    def on_frame(self, nic: int, smac: bytes, dmac: bytes, ethertype: int, frame: bytes) -> None:
        """Entry point used by the network when a frame arrives on ``nic``."""
        if not self.online:
            self.net.metrics.net["dropped_offline"] += 1
            return
        self.sim.schedule(self.cfg.proc_us, self._process_frame, nic, smac, ethertype, frame)

    def _process_frame(self, nic: int, smac: bytes, ethertype: int, frame: bytes) -> None:
        if not self.online:
            return
        kind = self.nics[nic].kind
        if ethertype == ETHERTYPE_CONTROL:
            try:
                msg = decode_control(frame)
            except PvhError:
                self.count("rx_bad_control")
                return
            self.count("ctrl_rx")
            self._dispatch(msg, RxContext(nic, smac, kind))
        elif ethertype == ETHERTYPE_DATA:
            try:
                packet = decode_pvh(frame)
                packet = record_on_packet(packet, nic, smac, kind)
            except RevPathOverflow:
                self.count("drop:RevPathOverflow")
                return
            except PvhError:
                self.count("drop:MalformedPathVector")
                return
            ctrl_type = _ctrl_type_of(packet)
            if ctrl_type is not None:
                self.count("ctrl_rx")
            action = forward_step(packet, self.nics, self.addr)
            if isinstance(action, Deliver):
                self.after(self.cfg.host_us, self._deliver, packet, RxContext(nic, smac, kind, packet))
            elif isinstance(action, Emit):
                if ctrl_type is None:
                    self.count("data_fwd")
                self._emit_packet(action)
            else:
                self.count(f"drop:{action.reason.value}")

    def _dispatch(self, msg: ControlMessage, ctx: RxContext) -> None:
        self.count(f"rx:{msg.msg_type.name}")
        if not self.cfg.clustering and msg.msg_type in _CLUSTER_ONLY:
            return
        try:
            getattr(self, _HANDLERS[msg.msg_type])(msg, ctx)
        except (KeyError, struct.error, ValueError, PvhError) as exc:
            # malformed or incomplete control message
            self.count("rx_bad_control")
            log.debug("%s: bad %s: %s", self.name, msg.msg_type.name, exc)

    def _deliver(self, packet: PvhPacket, ctx: RxContext) -> None:
        kind = packet.kind
        if kind == PacketKind.RAW:
            try:
                msg = decode_control(packet.payload)
            except PvhError:
                self.count("rx_bad_control")
                return
            self._dispatch(msg, ctx)
        elif kind == PacketKind.ECHO_REQUEST:
            self._on_echo_request(packet)
        elif kind == PacketKind.ECHO_REPLY:
            self._on_echo_reply(packet)
        elif kind == PacketKind.IP:
            self.count("ip_rx")
            self.tun.write(decap_ip(packet))

    def grow_rev(self, msg: ControlMessage, ctx: RxContext):
        """Reverse path of a flooded control message, extended by this hop."""
        try:
            return record_reverse_hop(msg.entries(Tlv.REV_PATH), ctx.nic, ctx.smac, ctx.link_kind)
        except RevPathOverflow:
            self.count("drop:RevPathOverflow")
            return None

    # -- echo -----------------------------------------------------------------

    def start_ping(self, dst: bytes, count: int, dst_name: str = "",
                   on_done: Optional[Callable[["PingSession"], None]] = None) -> "PingSession":
        session = PingSession(self, dst, dst_name or dst.hex(), count, on_done)
        self._pings[session.sid] = session
        session.step()
        return session

    def _on_echo_request(self, packet: PvhPacket) -> None:
        if packet.rev is None:
            self.count("drop:echo_without_rev")
            return
        self.send_packet(PvhPacket(PacketKind.ECHO_REPLY, self.addr, packet.src,
                                   reverse_to_pv(packet.rev), packet.payload))

    def _on_echo_reply(self, packet: PvhPacket) -> None:
        sid, seq, _ = _ECHO.unpack_from(packet.payload)
        session = self._pings.get(sid)
        if session is not None:
            session.on_reply(seq)

    # -- IP tunnel ------------------------------------------------------------

    def send_ip(self, ip_packet: bytes, on_fail: Optional[Callable[[bytes], None]] = None) -> None:
        dst = self.ip_map.lookup(ip_packet) if self.ip_map is not None else None
        if dst is None:
            self.count("ip_unmapped")
            if on_fail:
                on_fail(ip_packet)
            return

        def with_route(pv):
            if pv is None:
                self.count("ip_unreachable")
                if on_fail:
                    on_fail(ip_packet)
                return
            self.count("ip_tx")
            self.send_packet(encap_ip(ip_packet, self.addr, dst, pv))

        self.resolve_route(dst, with_route)

    def pump_tun(self) -> int:
        """Send everything waiting on the tun endpoint; return how many packets."""
        n = 0
        while (pkt := self.tun.read()) is not None:
            self.send_ip(pkt)
            n += 1
        return n


_CLUSTER_ONLY = frozenset({
    MsgType.CAP_BCAST, MsgType.HEAD_DECL, MsgType.JOIN_REQ, MsgType.JOIN_ACK,
    MsgType.SCAN_REQ, MsgType.SCAN_REP, MsgType.HELLO, MsgType.NBR_UPLOAD,
})


def _ctrl_type_of(packet: PvhPacket) -> Optional[MsgType]:
    if packet.kind != PacketKind.RAW or len(packet.payload) < 5:
        return None
    try:
        return MsgType(packet.payload[4])
    except ValueError:
        return None


class PingSession:
    """Sequential echo exchanges from one node to one destination."""

    def __init__(self, node: PvhNode, dst: bytes, dst_name: str, count: int, on_done):
        self.node = node
        self.dst = dst
        self.dst_name = dst_name
        self.count = count
        self.on_done = on_done
        self.sid = node.next_request_id()
        self.seq = 0
        self.samples: list[PingSample] = []
        self.failures: list[int] = []
        self.unreachable = 0
        self.done = False
        self._t_start = 0
        self._hops = 0
        self._waiting = False

    def step(self) -> None:
        if self.seq >= self.count:
            self.done = True
            self.node._pings.pop(self.sid, None)
            if self.on_done:
                self.on_done(self)
            return
        self.seq += 1
        self._t_start = self.node.now
        self.node.resolve_route(self.dst, self._with_route)

    def _next(self) -> None:
        self.node.after(self.node.cfg.ping_gap_us, self.step)

    def _with_route(self, pv: Optional[PathVector]) -> None:
        node = self.node
        if pv is None:
            self.unreachable += 1
            self.failures.append(self.seq)
            self._next()
            return
        self._hops = pv.hop_count
        self._waiting = True
        payload = _ECHO.pack(self.sid, self.seq, self._t_start)
        node.send_packet(PvhPacket(PacketKind.ECHO_REQUEST, node.addr, self.dst, pv, payload, rev=()))
        node.after(node.cfg.ping_timeout_us, self._timeout, self.seq)

    def on_reply(self, seq: int) -> None:
        if not self._waiting or seq != self.seq:
            return
        self._waiting = False
        node = self.node
        self.samples.append(PingSample(node.name, self.dst_name, self._hops, seq,
                                       node.now - self._t_start, seq == 1))
        self._next()

    def _timeout(self, seq: int) -> None:
        if not self._waiting or seq != self.seq:
            return
        self._waiting = False
        self.failures.append(seq)
        # source routes are only repaired by re-resolution
        self.node.route_cache.invalidate(self.dst)
        self._next()
