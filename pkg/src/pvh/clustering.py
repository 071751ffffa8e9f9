"""Capability-based cluster formation and maintenance.

Formation runs in three phases on every node:

1. capability broadcast: each node floods ``CAP_BCAST`` ``x`` hops out;
2. head election: a node whose ``(capability, addr)`` is the largest it has
   heard becomes head and floods ``HEAD_DECL`` ``x`` hops out, accumulating a
   reverse path; unassigned nodes join the best declared head;
3. scan rounds: nodes still unassigned ask their neighbors which cluster
   they are in and join the best answer.

Afterwards each node sends periodic hellos, and members upload their
neighbor table to the head, which rebuilds the cluster topology from them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .core import (
    ControlMessage,
    MsgType,
    PathVector,
    Tlv,
    entries_bytes,
    f64,
    u8,
    u16,
    u32,
)
from .errors import InvalidWeights
from .forwarding import LinkKind, reverse_to_pv

log = logging.getLogger(__name__)

WEIGHT_TOL = 1e-9


def capability_value(c: float, m: float, b: float, weights=(0.5, 0.3, 0.2)) -> float:
    """Weighted score ``alpha*c + beta*m + gamma*b`` with weights summing to one."""
    alpha, beta, gamma = weights
    if abs(alpha + beta + gamma - 1.0) > WEIGHT_TOL or min(weights) < 0:
        raise InvalidWeights(f"weights {weights!r} must be non-negative and sum to 1")
    for name, v in (("c", c), ("m", m), ("b", b)):
        if not 0.0 <= v <= 1.0 or math.isnan(v):
            raise ValueError(f"{name}={v} outside [0, 1]")
    return alpha * c + beta * m + gamma * b


@dataclass(frozen=True)
class Capability:
    c: float
    m: float
    b: float
    weights: tuple[float, float, float] = (0.5, 0.3, 0.2)

    @property
    def n(self) -> float:
        return capability_value(self.c, self.m, self.b, self.weights)


class Role(Enum):
    UNASSIGNED = "unassigned"
    MEMBER = "member"
    HEAD = "head"


@dataclass
class NeighborEntry:
    addr: bytes
    nic_id: int
    dmac: Optional[bytes]
    last_seen: int


@dataclass
class ClusterMembership:
    role: Role = Role.UNASSIGNED
    head_addr: Optional[bytes] = None
    head_capability: Optional[float] = None
    pv_to_head: Optional[PathVector] = None
    members: dict[bytes, int] = field(default_factory=dict)  # head only: addr -> join_round
    join_round: int = 0


@dataclass(frozen=True)
class ServiceRecord:
    name: str
    provider: bytes
    registered_at: int


def _better(a: tuple[float, bytes], b: Optional[tuple[float, bytes]]) -> bool:
    return b is None or a > b


class ClusteringMixin:
    """Cluster formation, hello/upload maintenance and offline sweeps."""

    def _init_clustering(self):
        self.caps: dict[bytes, float] = {}
        self._cap_relayed: dict[bytes, int] = {}
        self.membership = ClusterMembership()
        self.neighbors: dict[tuple[bytes, int], NeighborEntry] = {}
        self._candidates: dict[bytes, tuple[float, PathVector]] = {}
        self._decl_relayed: dict[tuple[bytes, int], int] = {}
        self._decl_best: dict[tuple[bytes, int], int] = {}
        self._decl_seq = 0
        self._joining: Optional[tuple] = None
        self._scan: Optional[dict] = None
        self._scan_seen: dict[tuple[bytes, int], int] = {}

    @property
    def joined(self) -> bool:
        return self.membership.role is not Role.UNASSIGNED

    # -- phase 1: capability broadcast -------------------------------------

    def start_cluster_init(self) -> None:
        cfg = self.cfg
        self.broadcast_ctrl(ControlMessage.build(
            MsgType.CAP_BCAST,
            (Tlv.ADDR, self.addr),
            (Tlv.CAPABILITY, f64(self.capability)),
            (Tlv.HOP_LIMIT, u8(cfg.x)),
        ))
        self.after(cfg.broadcast_phase_us, self.elect_head)
        self.after(cfg.join_deadline_us, self._join_deadline)
        self.every(cfg.scan_period_us, self.cluster_scan, first_delay=cfg.join_deadline_us + cfg.scan_period_us)
        self.every(cfg.hello_interval_us, self.send_hello,
                   first_delay=self.rng.randrange(cfg.hello_interval_us))

    def on_capability_broadcast(self, msg: ControlMessage, ctx) -> None:
        origin = msg.require(Tlv.ADDR)
        if origin == self.addr:
            return
        self.caps[origin] = msg.f64(Tlv.CAPABILITY)
        hops = msg.u8(Tlv.HOP_LIMIT)
        # relay a copy only if it can travel further than any copy relayed so far
        if hops > 1 and hops - 1 > self._cap_relayed.get(origin, 0):
            self._cap_relayed[origin] = hops - 1
            self.broadcast_ctrl(ControlMessage.build(
                MsgType.CAP_BCAST,
                (Tlv.ADDR, origin),
                (Tlv.CAPABILITY, msg.require(Tlv.CAPABILITY)),
                (Tlv.HOP_LIMIT, u8(hops - 1)),
            ), exclude_nic=ctx.nic)

    # -- phase 2: election and invitation ----------------------------------

    def elect_head(self) -> Role:
        mine = (self.capability, self.addr)
        best = max([(n, a) for a, n in self.caps.items()] + [mine])
        if best == mine and not self.joined:
            m = self.membership
            m.role = Role.HEAD
            m.head_addr = self.addr
            m.head_capability = self.capability
            m.pv_to_head = PathVector()
            m.join_round = 0
            log.debug("%s elected head", self.name)
            self._declare_head()
            self.every(self.cfg.head_keepalive_us, self._declare_head,
                       first_delay=self.cfg.head_keepalive_us)
        return self.membership.role

    def _declare_head(self) -> None:
        if self.membership.role is not Role.HEAD:
            return
        self._decl_seq += 1
        self.broadcast_ctrl(ControlMessage.build(
            MsgType.HEAD_DECL,
            (Tlv.HEAD, self.addr),
            (Tlv.CAPABILITY, f64(self.capability)),
            (Tlv.HOP_LIMIT, u8(self.cfg.x)),
            (Tlv.SEQ, u32(self._decl_seq)),
            (Tlv.REV_PATH, b""),
        ))

    def on_head_declaration(self, msg: ControlMessage, ctx) -> None:
        head = msg.require(Tlv.HEAD)
        if head == self.addr or self.membership.role is Role.HEAD:
            return
        rev = self.grow_rev(msg, ctx)
        if rev is None:
            return
        n = msg.f64(Tlv.CAPABILITY)
        key = (head, msg.u32(Tlv.SEQ))
        pv = reverse_to_pv(rev)
        m = self.membership
        shorter = pv.hop_count < self._decl_best.get(key, 1 << 30)
        if shorter:
            self._decl_best[key] = pv.hop_count
        if m.role is Role.UNASSIGNED and self._joining is None:
            known = self._candidates.get(head)
            if known is None or pv.hop_count < known[1].hop_count:
                self._candidates[head] = (n, pv)
            if self.now >= self.cfg.join_deadline_us and self.cfg.clustering:
                # a late declaration (keep-alive) doubles as an invitation
                self._join_deadline()
        elif m.role is Role.MEMBER and head == m.head_addr and shorter:
            m.pv_to_head = pv
        hops = msg.u8(Tlv.HOP_LIMIT)
        if hops > 1 and hops - 1 > self._decl_relayed.get(key, 0):
            self._decl_relayed[key] = hops - 1
            self.broadcast_ctrl(ControlMessage.build(
                MsgType.HEAD_DECL,
                (Tlv.HEAD, head),
                (Tlv.CAPABILITY, msg.require(Tlv.CAPABILITY)),
                (Tlv.HOP_LIMIT, u8(hops - 1)),
                (Tlv.SEQ, msg.require(Tlv.SEQ)),
                (Tlv.REV_PATH, entries_bytes(rev)),
            ), exclude_nic=ctx.nic)

    def _join_deadline(self) -> None:
        if self.joined or self._joining is not None or not self._candidates:
            return
        head, (n, pv) = max(self._candidates.items(), key=lambda kv: (kv[1][0], kv[0]))
        self._send_join(head, n, pv, 0)

    def _send_join(self, head: bytes, n: float, pv: PathVector, join_round: int) -> None:
        token = self.next_request_id()
        self._joining = (token, head, n, pv, join_round)
        self.send_ctrl(head, pv, ControlMessage.build(
            MsgType.JOIN_REQ,
            (Tlv.ADDR, self.addr),
            (Tlv.JOIN_ROUND, u16(join_round)),
            (Tlv.REQUEST_ID, u32(token)),
        ), with_rev=True)
        self.after(self.cfg.join_ack_timeout_us, self._join_timeout, token)

    def _join_timeout(self, token: int) -> None:
        if self._joining is not None and self._joining[0] == token:
            log.debug("%s: join timed out", self.name)
            self._joining = None

    def on_join_req(self, msg: ControlMessage, ctx) -> None:
        if self.membership.role is not Role.HEAD or ctx.packet is None or ctx.packet.rev is None:
            return
        member = msg.require(Tlv.ADDR)
        self.membership.members[member] = msg.u16(Tlv.JOIN_ROUND)
        self.send_ctrl(member, reverse_to_pv(ctx.packet.rev), ControlMessage.build(
            MsgType.JOIN_ACK,
            (Tlv.HEAD, self.addr),
            (Tlv.CAPABILITY, f64(self.capability)),
            (Tlv.REQUEST_ID, msg.require(Tlv.REQUEST_ID)),
        ))

    def on_join_ack(self, msg: ControlMessage, ctx) -> None:
        if self._joining is None:
            return
        token, head, n, pv, join_round = self._joining
        if msg.u32(Tlv.REQUEST_ID) != token or msg.require(Tlv.HEAD) != head:
            return
        self._joining = None
        m = self.membership
        m.role = Role.MEMBER
        m.head_addr = head
        m.head_capability = n
        m.pv_to_head = pv
        m.join_round = join_round
        self.count("joined")

    # -- phase 3: scan rounds ----------------------------------------------

    def scan_round_now(self) -> int:
        cfg = self.cfg
        return max(0, (self.now - cfg.join_deadline_us) // cfg.scan_period_us)

    def cluster_scan(self) -> None:
        if self.joined or self._joining is not None or not self.cfg.clustering:
            return
        rnd = self.scan_round_now()
        rid = self.next_request_id()
        self._scan = {"rid": rid, "round": rnd, "replies": []}
        self._scan_seen[(self.addr, rid)] = self.now
        self.count("scan_round")
        self.broadcast_ctrl(ControlMessage.build(
            MsgType.SCAN_REQ,
            (Tlv.ADDR, self.addr),
            (Tlv.REQUEST_ID, u32(rid)),
            (Tlv.HOP_LIMIT, u8(self.cfg.scan_hop_limit)),
            (Tlv.JOIN_ROUND, u16(rnd)),
            (Tlv.REV_PATH, b""),
        ))
        self.after(self.cfg.scan_period_us // 2, self._scan_decide, rid)

    def on_scan_request(self, msg: ControlMessage, ctx) -> None:
        scanner = msg.require(Tlv.ADDR)
        key = (scanner, msg.u32(Tlv.REQUEST_ID))
        if key in self._scan_seen:
            return
        self._scan_seen[key] = self.now
        rev = self.grow_rev(msg, ctx)
        if rev is None:
            return
        m = self.membership
        if self.joined:
            self.send_ctrl(scanner, reverse_to_pv(rev), ControlMessage.build(
                MsgType.SCAN_REP,
                (Tlv.HEAD, m.head_addr),
                (Tlv.CAPABILITY, f64(m.head_capability)),
                (Tlv.DISTANCE, u8(min(255, m.pv_to_head.hop_count))),
                (Tlv.JOIN_ROUND, u16(m.join_round)),
                (Tlv.PATH_VECTOR, m.pv_to_head.to_bytes()),
                (Tlv.REQUEST_ID, msg.require(Tlv.REQUEST_ID)),
            ), with_rev=True)
            return
        hops = msg.u8(Tlv.HOP_LIMIT)
        if hops > 1:
            self.broadcast_ctrl(ControlMessage.build(
                MsgType.SCAN_REQ,
                *[(t, v) for t, v in msg.tlvs if t not in (Tlv.HOP_LIMIT, Tlv.REV_PATH)],
                (Tlv.HOP_LIMIT, u8(hops - 1)),
                (Tlv.REV_PATH, entries_bytes(rev)),
            ), exclude_nic=ctx.nic)

    def on_scan_reply(self, msg: ControlMessage, ctx) -> None:
        scan = self._scan
        if scan is None or msg.u32(Tlv.REQUEST_ID) != scan["rid"] or ctx.packet is None or ctx.packet.rev is None:
            return
        to_replier = reverse_to_pv(ctx.packet.rev)
        replier_round = msg.u16(Tlv.JOIN_ROUND)
        # keeps every scan-joined member within x + join_round hops of its head
        if replier_round + to_replier.hop_count > scan["round"]:
            self.count("scan_reply_too_far")
            return
        pv = to_replier.concat(msg.path_vector())
        if pv.wire_len > 239:
            return
        scan["replies"].append((msg.f64(Tlv.CAPABILITY), msg.require(Tlv.HEAD), pv))

    def _scan_decide(self, rid: int) -> None:
        scan = self._scan
        if scan is None or scan["rid"] != rid:
            return
        self._scan = None
        if self.joined or self._joining is not None or not scan["replies"]:
            return
        n, head, pv = max(scan["replies"], key=lambda r: (r[0], r[1], -r[2].hop_count))
        self._send_join(head, n, pv, scan["round"])

    # -- maintenance ---------------------------------------------------------

    def send_hello(self) -> None:
        now = self.now
        self.broadcast_ctrl(ControlMessage.build(MsgType.HELLO, (Tlv.ADDR, self.addr)))
        expiry = self.cfg.neighbor_expiry_us
        for key in [k for k, e in self.neighbors.items() if now - e.last_seen > expiry]:
            del self.neighbors[key]
        role = self.membership.role
        if role is Role.HEAD:
            self.topology.merge_table(self.addr, self.neighbor_rows(), now)
            self.sweep_offline(now)
        elif role is Role.MEMBER:
            lo, hi = self.cfg.upload_jitter_us
            self.after(self.rng.randint(lo, hi), self.upload_neighbor_table)

    def on_hello(self, msg: ControlMessage, ctx) -> None:
        addr = msg.require(Tlv.ADDR)
        dmac = ctx.smac if ctx.link_kind is LinkKind.SHARED else None
        self.neighbors[(addr, ctx.nic)] = NeighborEntry(addr, ctx.nic, dmac, self.now)

    def neighbor_rows(self) -> list[tuple[bytes, int, Optional[bytes]]]:
        return [(e.addr, e.nic_id, e.dmac) for _, e in sorted(self.neighbors.items())]

    def upload_neighbor_table(self) -> None:
        m = self.membership
        if m.role is not Role.MEMBER or m.pv_to_head is None:
            self.count("upload_dropped")
            return
        rows = []
        for addr, nic, dmac in self.neighbor_rows():
            rows.append((Tlv.NEIGHBOR, addr + bytes((nic,)) + (dmac or b"")))
        self.send_ctrl(m.head_addr, m.pv_to_head,
                       ControlMessage.build(MsgType.NBR_UPLOAD, (Tlv.ADDR, self.addr), *rows))

    def on_neighbor_upload(self, msg: ControlMessage, ctx) -> None:
        if self.membership.role is not Role.HEAD:
            return
        rows = []
        for raw in msg.get_all(Tlv.NEIGHBOR):
            if len(raw) not in (7, 13):
                continue
            rows.append((raw[:6], raw[6], raw[7:13] if len(raw) == 13 else None))
        self.topology.merge_table(msg.require(Tlv.ADDR), rows, self.now)

    def sweep_offline(self, now: Optional[int] = None) -> set[bytes]:
        now = self.now if now is None else now
        return self.topology.sweep_offline(now, self.cfg.offline_window_us)
