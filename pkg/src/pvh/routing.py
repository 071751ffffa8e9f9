"""Intra-cluster BFS routing, route caching and inter-cluster probing."""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from .clustering import Role
from .core import (
    ControlMessage,
    MsgType,
    PathVector,
    Status,
    Tlv,
    entries_bytes,
    p2p,
    shared,
    u8,
    u32,
)
from .errors import MissingEdge, NoPath, UnknownNode
from .forwarding import reverse_to_pv

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Head-side topology
# ---------------------------------------------------------------------------


@dataclass
class Edge:
    nic: int
    dmac: Optional[bytes]
    last_refresh: int
    expired: bool = False


class TopologyGraph:
    """Directed labeled adjacency rebuilt from uploaded neighbor tables.

    Edge ``u -> v`` with label ``(nic, dmac)`` means that a frame sent out of
    u's NIC ``nic`` with destination MAC ``dmac`` (broadcast when None)
    reaches v.
    """

    def __init__(self):
        self._adj: dict[bytes, dict[bytes, Edge]] = {}
        self.last_upload: dict[bytes, int] = {}
        self.offline: dict[bytes, int] = {}

    def merge_table(self, owner: bytes, entries: Iterable[tuple[bytes, int, Optional[bytes]]], now: int) -> None:
        """Replace ``owner``'s outgoing edges with a fresh neighbor-table snapshot."""
        fresh: dict[bytes, Edge] = {}
        for addr, nic, dmac in entries:
            prev = fresh.get(addr)
            # parallel links: keep the lowest NIC id
            if prev is None or nic < prev.nic:
                fresh[addr] = Edge(nic, dmac, now)
        self._adj[owner] = fresh
        self.last_upload[owner] = now
        self.offline.pop(owner, None)
        for v, edges in self._adj.items():
            if owner in edges and v not in self.offline:
                # owner is back: edges into it become usable again
                edges[owner].expired = False

    def sweep_offline(self, now: int, window: int) -> set[bytes]:
        """Mark nodes silent for longer than ``window`` offline; return them."""
        stale = {n for n, t in self.last_upload.items() if now - t > window}
        for n in sorted(stale):
            if n not in self.offline:
                self.offline[n] = now
                log.debug("node %s offline", n.hex())
        for u, edges in self._adj.items():
            for v, e in edges.items():
                if u in stale or v in stale:
                    e.expired = True
        return stale

    def forget(self, node: bytes) -> None:
        self._adj.pop(node, None)
        self.last_upload.pop(node, None)
        self.offline.pop(node, None)

    def nodes(self) -> set[bytes]:
        out = set(self._adj)
        for edges in self._adj.values():
            out.update(edges)
        return out

    def __contains__(self, node: bytes) -> bool:
        if node in self._adj:
            return True
        return any(node in edges for edges in self._adj.values())

    def edge(self, u: bytes, v: bytes) -> Optional[Edge]:
        return self._adj.get(u, {}).get(v)

    def usable(self, u: bytes, v: bytes) -> bool:
        e = self.edge(u, v)
        return e is not None and not e.expired and u not in self.offline and v not in self.offline

    def successors(self, u: bytes) -> list[bytes]:
        """Usable out-neighbors of ``u`` in ascending address order."""
        if u in self.offline:
            return []
        return sorted(v for v, e in self._adj.get(u, {}).items() if not e.expired and v not in self.offline)

    def edges(self):
        for u, edges in self._adj.items():
            for v, e in edges.items():
                yield u, v, e

    def members(self) -> list[bytes]:
        """Nodes that have uploaded a table and are not offline."""
        return sorted(n for n in self._adj if n not in self.offline)


def bfs_route(topo: TopologyGraph, src: bytes, dst: bytes) -> list[bytes]:
    """Minimum-hop node sequence from ``src`` to ``dst`` over usable edges.

    Equal-length alternatives are broken by expanding neighbors in ascending
    address order, so the result is deterministic.
    """
    if src not in topo:
        raise UnknownNode(src.hex())
    if dst not in topo:
        raise UnknownNode(dst.hex())
    if src == dst:
        return [src]
    parent: dict[bytes, bytes] = {src: src}
    queue = deque([src])
    while queue:
        u = queue.popleft()
        for v in topo.successors(u):
            if v in parent:
                continue
            parent[v] = u
            if v == dst:
                path = [v]
                while path[-1] != src:
                    path.append(parent[path[-1]])
                return path[::-1]
            queue.append(v)
    raise NoPath(f"{src.hex()} -> {dst.hex()}")


def path_to_pv(topo: TopologyGraph, seq: list[bytes]) -> PathVector:
    hops = []
    for u, v in zip(seq, seq[1:]):
        e = topo.edge(u, v)
        if e is None:
            raise MissingEdge(f"{u.hex()} -> {v.hex()}")
        hops.append(shared(e.nic, e.dmac) if e.dmac is not None else p2p(e.nic))
    return PathVector.from_hops(hops)


# ---------------------------------------------------------------------------
# Caches
# ---------------------------------------------------------------------------


class RouteCache:
    def __init__(self, ttl_us: int):
        self.ttl_us = ttl_us
        self._entries: dict[bytes, tuple[PathVector, int]] = {}

    def get(self, dst: bytes, now: int) -> Optional[PathVector]:
        hit = self._entries.get(dst)
        if hit is None:
            return None
        pv, stored_at = hit
        if now - stored_at > self.ttl_us:
            del self._entries[dst]
            return None
        return pv

    def put(self, dst: bytes, pv: PathVector, now: int) -> None:
        self._entries[dst] = (pv, now)

    def invalidate(self, dst: bytes) -> None:
        self._entries.pop(dst, None)

    def __len__(self):
        return len(self._entries)


class ProbeDedup:
    """Seen-set of ``(origin, request_id)`` keys that forget after ``ttl_us``."""

    def __init__(self, ttl_us: int):
        self.ttl_us = ttl_us
        self._seen: dict[tuple, int] = {}

    def seen(self, key: tuple, now: int) -> bool:
        t = self._seen.get(key)
        if t is None:
            return False
        if now - t > self.ttl_us:
            del self._seen[key]
            return False
        return True

    def add(self, key: tuple, now: int) -> None:
        self._seen[key] = now
        if len(self._seen) > 4096:
            self._prune(now)

    def first_time(self, key: tuple, now: int) -> bool:
        if self.seen(key, now):
            return False
        self.add(key, now)
        return True

    def _prune(self, now: int) -> None:
        for k in [k for k, t in self._seen.items() if now - t > self.ttl_us]:
            del self._seen[k]


# ---------------------------------------------------------------------------
# Node-side behaviour
# ---------------------------------------------------------------------------

RouteCallback = Callable[[Optional[PathVector]], None]


class RoutingMixin:
    """Route resolution for PvhNode: cache, head request, relayed probe."""

    def _init_routing(self):
        self.route_cache = RouteCache(self.cfg.route_ttl_us)
        self.probe_dedup = ProbeDedup(self.cfg.dedup_ttl_us)
        self._route_waiters: dict[bytes, list[RouteCallback]] = {}
        self._route_reqs: dict[int, bytes] = {}
        self._probes: dict[int, tuple[str, object]] = {}

    # -- resolution ---------------------------------------------------------

    def resolve_route(self, dst: bytes, callback: RouteCallback) -> None:
        """Deliver a path vector to ``dst`` (or None when unreachable) to ``callback``."""
        if dst == self.addr:
            callback(PathVector())
            return
        pv = self.route_cache.get(dst, self.now)
        if pv is not None:
            self.count("route_cache_hit")
            callback(pv)
            return
        waiters = self._route_waiters.setdefault(dst, [])
        waiters.append(callback)
        if len(waiters) > 1:
            return
        role = self.membership.role
        if role is Role.HEAD:
            self.after(self.cfg.proc_us, self._head_local_route, dst)
        elif role is Role.MEMBER and self.membership.pv_to_head is not None:
            rid = self.next_request_id()
            self._route_reqs[rid] = dst
            msg = ControlMessage.build(
                MsgType.ROUTE_REQ,
                (Tlv.ADDR, self.addr),
                (Tlv.TARGET, dst),
                (Tlv.REQUEST_ID, u32(rid)),
            )
            self.send_ctrl(self.membership.head_addr, self.membership.pv_to_head, msg, with_rev=True)
            self.after(self.cfg.route_req_timeout_us, self._route_req_timeout, rid)
        else:
            self.start_probe(dst)

    def _finish_route(self, dst: bytes, pv: Optional[PathVector]) -> None:
        if pv is not None:
            self.route_cache.put(dst, pv, self.now)
        for cb in self._route_waiters.pop(dst, []):
            cb(pv)

    def compute_route(self, src: bytes, dst: bytes) -> Optional[PathVector]:
        """Head-only: BFS over the cluster topology."""
        self.count("bfs_calls")
        try:
            return path_to_pv(self.topology, bfs_route(self.topology, src, dst))
        except (NoPath, UnknownNode, MissingEdge):
            return None

    def _head_local_route(self, dst: bytes) -> None:
        pv = self.compute_route(self.addr, dst)
        if pv is not None:
            self._finish_route(dst, pv)
        else:
            self.start_probe(dst)

    def _route_req_timeout(self, rid: int) -> None:
        dst = self._route_reqs.pop(rid, None)
        if dst is not None:
            self.start_probe(dst)

    def on_route_req(self, msg: ControlMessage, ctx) -> None:
        if self.membership.role is not Role.HEAD:
            self.count("route_req_not_head")
            return
        requester = msg.require(Tlv.ADDR)
        target = msg.require(Tlv.TARGET)
        pv = self.compute_route(requester, target)
        fields = [(Tlv.TARGET, target), (Tlv.REQUEST_ID, msg.require(Tlv.REQUEST_ID))]
        if pv is None:
            fields.append((Tlv.STATUS, u8(Status.NOT_IN_CLUSTER)))
        else:
            fields.append((Tlv.STATUS, u8(Status.OK)))
            fields.append((Tlv.PATH_VECTOR, pv.to_bytes()))
        back = self.compute_route(self.addr, requester)
        if back is None and ctx.packet is not None and ctx.packet.rev is not None:
            back = reverse_to_pv(ctx.packet.rev)
        if back is None:
            return
        self.send_ctrl(requester, back, ControlMessage.build(MsgType.ROUTE_REP, *fields))

    def on_route_rep(self, msg: ControlMessage, ctx) -> None:
        dst = self._route_reqs.pop(msg.u32(Tlv.REQUEST_ID), None)
        if dst is None:
            return
        if msg.u8(Tlv.STATUS) == Status.OK:
            self._finish_route(dst, msg.path_vector())
        else:
            self.start_probe(dst)

    # -- relayed broadcast probing -----------------------------------------

    def start_probe(self, dst: Optional[bytes] = None, service: Optional[str] = None,
                    on_service: Optional[Callable] = None) -> int:
        """Flood a PROBE_REQ for a host address or a service name."""
        rid = self.next_request_id()
        self.probe_dedup.add((self.addr, rid), self.now)
        fields = [(Tlv.ADDR, self.addr), (Tlv.REQUEST_ID, u32(rid)),
                  (Tlv.HOP_LIMIT, u8(self.cfg.probe_hop_limit)), (Tlv.REV_PATH, b"")]
        if dst is not None:
            fields.insert(0, (Tlv.TARGET, dst))
            self._probes[rid] = ("route", dst)
        else:
            fields.insert(0, (Tlv.SERVICE, service.encode()))
            self._probes[rid] = ("service", (service, on_service))
        self.count("probe_started")
        self.broadcast_ctrl(ControlMessage.build(MsgType.PROBE_REQ, *fields))
        self.after(self.cfg.probe_timeout_us, self._probe_timeout, rid)
        return rid

    def _probe_timeout(self, rid: int) -> None:
        pending = self._probes.pop(rid, None)
        if pending is None:
            return
        kind, what = pending
        if kind == "route":
            self._finish_route(what, None)
        else:
            service, cb = what
            cb(None)

    def on_probe_req(self, msg: ControlMessage, ctx) -> None:
        origin = msg.require(Tlv.ADDR)
        rid = msg.u32(Tlv.REQUEST_ID)
        if not self.probe_dedup.first_time((origin, rid), self.now):
            self.count("probe_dup")
            return
        rev = self.grow_rev(msg, ctx)
        if rev is None:
            return
        target = msg.get(Tlv.TARGET)
        service = msg.get(Tlv.SERVICE)
        hit = (target == self.addr) or (service is not None and self.provides(service.decode()))
        if hit:
            fields = [(Tlv.ADDR, self.addr), (Tlv.REQUEST_ID, msg.require(Tlv.REQUEST_ID))]
            if service is not None:
                fields.append((Tlv.SERVICE, service))
            self.send_ctrl(origin, reverse_to_pv(rev), ControlMessage.build(MsgType.PROBE_REP, *fields),
                           with_rev=True)
            return
        hops = msg.u8(Tlv.HOP_LIMIT)
        if hops > 1:
            self.count("probe_relay")
            relay = ControlMessage.build(
                MsgType.PROBE_REQ,
                *[(t, v) for t, v in msg.tlvs if t not in (Tlv.HOP_LIMIT, Tlv.REV_PATH)],
                (Tlv.HOP_LIMIT, u8(hops - 1)),
                (Tlv.REV_PATH, entries_bytes(rev)),
            )
            self.broadcast_ctrl(relay, exclude_nic=ctx.nic)

    def on_probe_rep(self, msg: ControlMessage, ctx) -> None:
        pending = self._probes.pop(msg.u32(Tlv.REQUEST_ID), None)
        if pending is None or ctx.packet is None or ctx.packet.rev is None:
            return
        provider = msg.require(Tlv.ADDR)
        pv = reverse_to_pv(ctx.packet.rev)
        self.route_cache.put(provider, pv, self.now)
        kind, what = pending
        if kind == "route":
            self._finish_route(what, pv)
        else:
            service, cb = what
            cb(provider)
