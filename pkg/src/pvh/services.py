"""Service registration and discovery in three modes.

``cluster``
    providers register with their head; queries go to the head first and
    fall back to a relayed probe carrying the service name.
``push``
    providers flood every service at registration and again each keep-alive
    period; every node answers queries from its own cache.
``pull``
    nothing is sent at registration; a query floods the network and the
    provider answers along the reversed path.
"""

from __future__ import annotations

from typing import Callable, Optional

from .clustering import Role, ServiceRecord
from .core import ControlMessage, MsgType, Status, Tlv, entries_bytes, u8, u32
from .forwarding import reverse_to_pv
from .routing import ProbeDedup

MAX_SERVICE_NAME = 64
MODES = ("cluster", "push", "pull")

ServiceCallback = Callable[[Optional[bytes]], None]


class ServiceMixin:

    def _init_services(self):
        self.local_services: dict[str, ServiceRecord] = {}
        self.registry: dict[str, dict[bytes, ServiceRecord]] = {}
        self.svc_cache: dict[str, tuple[bytes, int]] = {}
        self.svc_dedup = ProbeDedup(self.cfg.dedup_ttl_us)
        self._svc_queries: dict[int, tuple[str, ServiceCallback]] = {}

    @property
    def service_mode(self) -> str:
        return self.cfg.service_mode

    def provides(self, name: str) -> bool:
        return name in self.local_services

    def register_service(self, name: str) -> None:
        raw = name.encode("utf-8")
        if not raw or len(raw) > MAX_SERVICE_NAME:
            raise ValueError(f"service name must be 1..{MAX_SERVICE_NAME} octets")
        rec = ServiceRecord(name, self.addr, self.now)
        self.local_services[name] = rec
        mode = self.service_mode
        if mode == "cluster":
            m = self.membership
            if m.role is Role.HEAD:
                self.registry.setdefault(name, {})[self.addr] = rec
            elif m.role is Role.MEMBER:
                self.send_ctrl(m.head_addr, m.pv_to_head, ControlMessage.build(
                    MsgType.SVC_REG, (Tlv.SERVICE, raw), (Tlv.ADDR, self.addr)))
            else:
                self.count("svc_reg_unassigned")
        elif mode == "push":
            self.svc_cache[name] = (self.addr, self.now)
            self._push(name)
            self.every(self.cfg.push_keepalive_us, self._push, self.cfg.push_keepalive_us, name)

    def _push(self, name: str) -> None:
        rid = self.next_request_id()
        self.svc_dedup.add((self.addr, rid), self.now)
        self.broadcast_ctrl(ControlMessage.build(
            MsgType.SVC_PUSH,
            (Tlv.SERVICE, name.encode()),
            (Tlv.ADDR, self.addr),
            (Tlv.REQUEST_ID, u32(rid)),
            (Tlv.HOP_LIMIT, u8(self.cfg.probe_hop_limit)),
        ))

    def on_svc_reg(self, msg: ControlMessage, ctx) -> None:
        if self.membership.role is not Role.HEAD:
            return
        provider = msg.require(Tlv.ADDR)
        name = msg.text(Tlv.SERVICE)
        self.registry.setdefault(name, {})[provider] = ServiceRecord(name, provider, self.now)

    def on_svc_push(self, msg: ControlMessage, ctx) -> None:
        provider = msg.require(Tlv.ADDR)
        if not self.svc_dedup.first_time((provider, msg.u32(Tlv.REQUEST_ID)), self.now):
            return
        self.svc_cache[msg.text(Tlv.SERVICE)] = (provider, self.now)
        hops = msg.u8(Tlv.HOP_LIMIT)
        if hops > 1:
            self.broadcast_ctrl(ControlMessage.build(
                MsgType.SVC_PUSH,
                *[(t, v) for t, v in msg.tlvs if t != Tlv.HOP_LIMIT],
                (Tlv.HOP_LIMIT, u8(hops - 1)),
            ), exclude_nic=ctx.nic)

    # -- queries -------------------------------------------------------------

    def query_service(self, name: str, callback: ServiceCallback) -> None:
        """Find a provider of ``name``; ``callback`` gets its address or None."""
        if self.provides(name):
            callback(self.addr)
            return
        mode = self.service_mode
        if mode == "push":
            hit = self.svc_cache.get(name)
            if hit is not None:
                callback(hit[0])
            else:
                self.after(self.cfg.query_timeout_us, callback, None)
            return
        if mode == "cluster":
            m = self.membership
            if m.role is Role.HEAD:
                self.after(self.cfg.proc_us, self._head_lookup, name, callback)
                return
            if m.role is Role.MEMBER:
                rid = self.next_request_id()
                self._svc_queries[rid] = (name, callback)
                self.send_ctrl(m.head_addr, m.pv_to_head, ControlMessage.build(
                    MsgType.SVC_QUERY,
                    (Tlv.SERVICE, name.encode()),
                    (Tlv.ADDR, self.addr),
                    (Tlv.REQUEST_ID, u32(rid)),
                ), with_rev=True)
                self.after(self.cfg.query_timeout_us, self._query_timeout, rid)
                return
            self.start_probe(service=name, on_service=callback)
            return
        rid = self.next_request_id()
        self._svc_queries[rid] = (name, callback)
        self.svc_dedup.add((self.addr, rid), self.now)
        self.broadcast_ctrl(ControlMessage.build(
            MsgType.SVC_QUERY,
            (Tlv.SERVICE, name.encode()),
            (Tlv.ADDR, self.addr),
            (Tlv.REQUEST_ID, u32(rid)),
            (Tlv.HOP_LIMIT, u8(self.cfg.probe_hop_limit)),
            (Tlv.REV_PATH, b""),
        ))
        self.after(self.cfg.query_timeout_us, self._query_timeout, rid)

    def _registry_lookup(self, name: str) -> Optional[bytes]:
        providers = self.registry.get(name)
        return min(providers) if providers else None

    def _head_lookup(self, name: str, callback: ServiceCallback) -> None:
        provider = self._registry_lookup(name)
        if provider is not None:
            callback(provider)
        else:
            self.start_probe(service=name, on_service=callback)

    def _query_timeout(self, rid: int) -> None:
        pending = self._svc_queries.pop(rid, None)
        if pending is not None:
            pending[1](None)

    def on_svc_query(self, msg: ControlMessage, ctx) -> None:
        requester = msg.require(Tlv.ADDR)
        name = msg.text(Tlv.SERVICE)
        if ctx.packet is not None:
            # unicast query to the head (cluster mode)
            if self.membership.role is not Role.HEAD:
                return
            provider = self._registry_lookup(name)
            fields = [(Tlv.SERVICE, name.encode()), (Tlv.REQUEST_ID, msg.require(Tlv.REQUEST_ID))]
            if provider is None:
                fields.append((Tlv.STATUS, u8(Status.NOT_FOUND)))
            else:
                fields += [(Tlv.STATUS, u8(Status.OK)), (Tlv.ADDR, provider)]
            back = self.compute_route(self.addr, requester)
            if back is None and ctx.packet.rev is not None:
                back = reverse_to_pv(ctx.packet.rev)
            if back is not None:
                self.send_ctrl(requester, back, ControlMessage.build(MsgType.SVC_REP, *fields))
            return
        # flooded query (pull mode)
        if not self.svc_dedup.first_time((requester, msg.u32(Tlv.REQUEST_ID)), self.now):
            return
        rev = self.grow_rev(msg, ctx)
        if rev is None:
            return
        if self.provides(name):
            self.send_ctrl(requester, reverse_to_pv(rev), ControlMessage.build(
                MsgType.SVC_REP,
                (Tlv.SERVICE, name.encode()),
                (Tlv.REQUEST_ID, msg.require(Tlv.REQUEST_ID)),
                (Tlv.STATUS, u8(Status.OK)),
                (Tlv.ADDR, self.addr),
            ), with_rev=True)
            return
        hops = msg.u8(Tlv.HOP_LIMIT)
        if hops > 1:
            self.broadcast_ctrl(ControlMessage.build(
                MsgType.SVC_QUERY,
                *[(t, v) for t, v in msg.tlvs if t not in (Tlv.HOP_LIMIT, Tlv.REV_PATH)],
                (Tlv.HOP_LIMIT, u8(hops - 1)),
                (Tlv.REV_PATH, entries_bytes(rev)),
            ), exclude_nic=ctx.nic)

    def on_svc_rep(self, msg: ControlMessage, ctx) -> None:
        pending = self._svc_queries.pop(msg.u32(Tlv.REQUEST_ID), None)
        if pending is None:
            return
        name, callback = pending
        if msg.u8(Tlv.STATUS) == Status.OK:
            provider = msg.require(Tlv.ADDR)
            if ctx.packet is not None and ctx.packet.rev is not None:
                self.route_cache.put(provider, reverse_to_pv(ctx.packet.rev), self.now)
            callback(provider)
        else:
            self.start_probe(service=name, on_service=callback)
