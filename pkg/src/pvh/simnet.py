"""
Deterministic discrete-event network simulator.

Topology file format (one directive per line, ``#`` starts a comment)::

    node <name> cap <c> <m> <b>
    link p2p <name>:<nic> <name>:<nic> [latency_us N] [loss P]
    link shared <lname> [latency_us N] [loss P]
    attach <lname> <name>:<nic> [<name>:<nic> ...]
    ipmap <ipv4> <name>

Virtual time is an integer count of microseconds.  Every random draw comes
from generators seeded by the scenario seed, so a (topology, seed) pair fully
determines the event trace.
"""

from __future__ import annotations

import hashlib
import heapq
import ipaddress
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .clustering import capability_value
from .config import DEFAULT_LINKS, ProtocolConfig
from .core import BROADCAST_MAC, ETHERTYPE_CONTROL
from .errors import DanglingAttachment, DuplicateNic, ParseError, UnattachedNic, Unreachable
from .forwarding import LinkKind
from .node import NicInfo, PingSample, PvhNode
from .tunnel import IpMapping

log = logging.getLogger(__name__)

ETH_MIN_PAYLOAD = 46


class Simulator:
    """Event loop: a heap of ``(at, seq, fn, args)`` executed in order."""

    def __init__(self):
        self.now = 0
        self._queue: list = []
        self._seq = 0
        self.trace: Optional[list] = None
        self.executed = 0

    def schedule(self, delay: int, fn: Callable, *args) -> None:
        self.schedule_at(self.now + delay, fn, *args)

    def schedule_at(self, at: int, fn: Callable, *args) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule at {at} < now {self.now}")
        self._seq += 1
        heapq.heappush(self._queue, (at, self._seq, fn, args))

    def _pop(self):
        at, seq, fn, args = heapq.heappop(self._queue)
        self.now = at
        self.executed += 1
        if self.trace is not None:
            self.trace.append((at, seq, getattr(fn, "__qualname__", repr(fn))))
        fn(*args)

    def run_until(self, t: int) -> None:
        if t < self.now:
            raise ValueError(f"run_until({t}) is in the past (now={self.now})")
        q = self._queue
        while q and q[0][0] <= t:
            self._pop()
        self.now = t

    def run_while(self, keep_going: Callable[[], bool], deadline: int) -> bool:
        """Execute events while ``keep_going()`` and before ``deadline``.

        Returns True when the predicate turned false.
        """
        q = self._queue
        while keep_going():
            if not q or q[0][0] > deadline:
                self.now = max(self.now, deadline)
                return not keep_going()
            self._pop()
        return True

    def __len__(self):
        return len(self._queue)


class Metrics:
    """Per-node counters bucketed by experiment stage, plus ping samples."""

    def __init__(self):
        self.stage = "init"
        self.stages: list[tuple[str, int]] = [("init", 0)]
        self.counters: Counter = Counter()
        self.net: Counter = Counter()
        self.samples: list[tuple[str, PingSample]] = []

    def count(self, node: str, key: str, n: int = 1) -> None:
        self.counters[(self.stage, node, key)] += n

    def set_stage(self, name: str, t: int) -> None:
        self.stage = name
        self.stages.append((name, t))

    def total(self, key: str, stage: Optional[str] = None, node: Optional[str] = None) -> int:
        return sum(v for (s, n, k), v in self.counters.items()
                   if k == key and (stage is None or s == stage) and (node is None or n == node))

    def total_prefix(self, prefix: str, stage: Optional[str] = None) -> int:
        return sum(v for (s, n, k), v in self.counters.items()
                   if k.startswith(prefix) and (stage is None or s == stage))

    def per_node(self, key: str, stage: Optional[str] = None) -> dict[str, int]:
        out: Counter = Counter()
        for (s, n, k), v in self.counters.items():
            if k == key and (stage is None or s == stage):
                out[n] += v
        return dict(out)

    def add_sample(self, sample: PingSample) -> None:
        if sample.rtt_us <= 0:
            raise ValueError("ping samples must have positive rtt")
        self.samples.append((self.stage, sample))


@dataclass
class Link:
    name: str
    kind: LinkKind
    attachments: list[tuple[str, int]] = field(default_factory=list)
    latency_us: int = 0
    loss: float = 0.0


@dataclass
class Host:
    name: str
    cap: tuple[float, float, float]
    nics: dict[int, str] = field(default_factory=dict)  # nic -> link name
    macs: dict[int, bytes] = field(default_factory=dict)
    addr: bytes = b""
    agent: Optional[PvhNode] = None
    inbox: list = field(default_factory=list)


def pseudo_mac(seed: int, name: str, nic: int) -> bytes:
    """Stable locally-administered unicast MAC for ``(name, nic)`` under ``seed``."""
    key = seed.to_bytes(8, "big", signed=True)
    h = hashlib.blake2b(f"{name}:{nic}".encode(), key=key, digest_size=6).digest()
    return bytes(((h[0] | 0x02) & 0xFE,)) + h[1:]


class Network:
    def __init__(self, seed: int = 0, cfg: Optional[ProtocolConfig] = None):
        self.seed = seed
        self.cfg = cfg or ProtocolConfig()
        self.sim = Simulator()
        self.metrics = Metrics()
        self.rng = random.Random(f"net:{seed}")
        self.hosts: dict[str, Host] = {}
        self.links: dict[str, Link] = {}
        self._attach: dict[tuple[str, int], Link] = {}
        self._mac_owner: dict[bytes, tuple[str, int]] = {}
        self.by_addr: dict[bytes, str] = {}
        self.ip_map = IpMapping()
        self._ipmap_names: list[tuple[str, str]] = []
        self.name = "scenario"

    # -- construction --------------------------------------------------------

    def add_host(self, name: str, cap=(0.5, 0.5, 0.5)) -> Host:
        if name in self.hosts:
            raise ValueError(f"duplicate node {name!r}")
        host = Host(name, tuple(cap))
        self.hosts[name] = host
        return host

    def add_link(self, name: str, kind: LinkKind, latency_us: Optional[int] = None, loss: float = 0.0) -> Link:
        kind = LinkKind(kind)
        if latency_us is None:
            latency_us = DEFAULT_LINKS.p2p_latency_us if kind is LinkKind.P2P else DEFAULT_LINKS.shared_latency_us
        link = Link(name, kind, [], int(latency_us), float(loss))
        self.links[name] = link
        return link

    def attach(self, link_name: str, node: str, nic: int) -> None:
        link = self.links.get(link_name)
        if link is None:
            raise DanglingAttachment(f"no link named {link_name!r}")
        host = self.hosts.get(node)
        if host is None:
            raise DanglingAttachment(f"no node named {node!r}")
        if not 1 <= nic <= 127:
            raise ParseError(f"NIC id {nic} outside 1..127")
        if (node, nic) in self._attach:
            raise DuplicateNic(f"{node}:{nic} is already attached")
        if link.kind is LinkKind.P2P and len(link.attachments) >= 2:
            raise ParseError(f"p2p link {link_name!r} already has two ends")
        link.attachments.append((node, nic))
        self._attach[(node, nic)] = link
        host.nics[nic] = link_name
        mac = pseudo_mac(self.seed, node, nic)
        if mac in self._mac_owner:
            raise ValueError(f"pseudo-MAC collision between {self._mac_owner[mac]} and {(node, nic)}")
        self._mac_owner[mac] = (node, nic)
        host.macs[nic] = mac

    def connect(self, a: str, nic_a: int, b: str, nic_b: int, latency_us: Optional[int] = None,
                loss: float = 0.0) -> Link:
        link = self.add_link(f"{a}:{nic_a}-{b}:{nic_b}", LinkKind.P2P, latency_us, loss)
        self.attach(link.name, a, nic_a)
        self.attach(link.name, b, nic_b)
        return link

    def finalize(self) -> None:
        for link in self.links.values():
            need = 2
            if len(link.attachments) < need:
                raise ParseError(f"link {link.name!r} has {len(link.attachments)} attachment(s)")
        self.by_addr.clear()
        for host in self.hosts.values():
            if host.nics:
                host.addr = host.macs[min(host.nics)]
            else:
                host.addr = pseudo_mac(self.seed, host.name, 0)
            if host.addr in self.by_addr:
                raise ValueError(f"address collision: {host.name} / {self.by_addr[host.addr]}")
            self.by_addr[host.addr] = host.name
        for ip, name in self._ipmap_names:
            self.ip_map.add(ip, self.hosts[name].addr)

    def spawn(self, cfg: Optional[ProtocolConfig] = None, start: bool = True) -> "Network":
        """Create one protocol agent per host and start them."""
        if cfg is not None:
            self.cfg = cfg
        self.finalize()
        for name in sorted(self.hosts):
            host = self.hosts[name]
            nics = {nic: NicInfo(nic, self.links[lname].kind, host.macs[nic]) for nic, lname in host.nics.items()}
            n = capability_value(*host.cap, weights=self.cfg.weights)
            host.agent = PvhNode(name, host.addr, n, nics, self, self.cfg, seed=self.seed)
            host.agent.ip_map = self.ip_map
        if start:
            for name in sorted(self.hosts):
                self.hosts[name].agent.start()
        return self

    # -- frames ---------------------------------------------------------------

    def mac_of(self, node: str, nic: int) -> bytes:
        return self.hosts[node].macs[nic]

    def receivers(self, node: str, nic: int, dmac: bytes) -> list[tuple[str, int]]:
        link = self._attach.get((node, nic))
        if link is None:
            raise UnattachedNic(f"{node}:{nic} is not attached")
        others = [a for a in link.attachments if a != (node, nic)]
        if link.kind is LinkKind.P2P or dmac == BROADCAST_MAC:
            return others
        return [a for a in others if self.hosts[a[0]].macs[a[1]] == dmac]

    def emit_frame(self, node: str, nic: int, dmac: bytes, payload: bytes, ethertype: int) -> int:
        """Put a frame on the wire; return the number of scheduled deliveries."""
        link = self._attach.get((node, nic))
        if link is None:
            raise UnattachedNic(f"{node}:{nic} is not attached")
        smac = self.hosts[node].macs[nic]
        if len(payload) < ETH_MIN_PAYLOAD:
            payload = payload + bytes(ETH_MIN_PAYLOAD - len(payload))
        kind = "ctrl" if ethertype == ETHERTYPE_CONTROL else "data"
        scheduled = 0
        for rnode, rnic in self.receivers(node, nic, dmac):
            self.metrics.net[f"{kind}_sent"] += 1
            if link.loss > 0 and self.rng.random() < link.loss:
                self.metrics.net[f"{kind}_lost"] += 1
                continue
            self.metrics.net[f"{kind}_in_flight"] += 1
            self.sim.schedule(link.latency_us, self._arrive, kind, rnode, rnic, smac, dmac, ethertype, payload)
            scheduled += 1
        return scheduled

    def _arrive(self, kind, node, nic, smac, dmac, ethertype, payload) -> None:
        net = self.metrics.net
        net[f"{kind}_in_flight"] -= 1
        net[f"{kind}_arrived"] += 1
        host = self.hosts[node]
        if host.agent is not None:
            host.agent.on_frame(nic, smac, dmac, ethertype, payload)
        else:
            host.inbox.append((self.sim.now, nic, smac, dmac, ethertype, payload))

    # -- queries over the ground truth -------------------------------------

    def node(self, name: str) -> PvhNode:
        return self.hosts[name].agent

    def agents(self) -> list[PvhNode]:
        return [self.hosts[n].agent for n in sorted(self.hosts)]

    def name_of(self, addr: bytes) -> str:
        return self.by_addr.get(addr, addr.hex())

    def adjacency(self) -> dict[str, set[str]]:
        adj = {n: set() for n in self.hosts}
        for link in self.links.values():
            ends = [a[0] for a in link.attachments]
            for a in ends:
                for b in ends:
                    if a != b:
                        adj[a].add(b)
        return adj

    def hop_matrix(self, use_numba: Optional[bool] = None) -> tuple[list[str], np.ndarray]:
        names = sorted(self.hosts)
        index = {n: i for i, n in enumerate(names)}
        adj = self.adjacency()
        edges = [(index[a], index[b]) for a in names for b in adj[a]]
        indptr, indices = _kernels.to_csr(len(names), edges)
        return names, _kernels.hop_matrix(indptr, indices, len(names), use_numba)

    # -- driving ----------------------------------------------------------------

    def run_until(self, t: int) -> None:
        self.sim.run_until(t)

    def run_for(self, dt: int) -> None:
        self.sim.run_until(self.sim.now + dt)

    def set_stage(self, name: str) -> None:
        self.metrics.set_stage(name, self.sim.now)

    def silence(self, name: str) -> None:
        self.hosts[name].agent.set_online(False)

    def revive(self, name: str) -> None:
        self.hosts[name].agent.set_online(True)

    def ping(self, src: str, dst: str, count: int, record: bool = True):
        """Run ``count`` sequential echoes and return the session."""
        agent = self.node(src)
        dst_addr = self.hosts[dst].addr
        session = agent.start_ping(dst_addr, count, dst_name=dst)
        cfg = self.cfg
        budget = count * (cfg.ping_timeout_us + cfg.ping_gap_us) + 2 * cfg.probe_timeout_us + cfg.route_req_timeout_us
        self.sim.run_while(lambda: not session.done, self.sim.now + budget)
        if record:
            for s in session.samples:
                self.metrics.add_sample(s)
        return session

    def ping_samples(self, src: str, dst: str, count: int) -> list[PingSample]:
        session = self.ping(src, dst, count)
        if not session.samples:
            raise Unreachable(f"{src} -> {dst}")
        return session.samples


# ---------------------------------------------------------------------------
# Topology files
# ---------------------------------------------------------------------------


@dataclass
class TopologySpec:
    nodes: dict[str, tuple[tuple[float, float, float], int]] = field(default_factory=dict)
    links: list[dict] = field(default_factory=list)
    ipmap: list[tuple[str, str, int]] = field(default_factory=list)


def _endpoint(tok: str, line: int) -> tuple[str, int]:
    name, sep, nic = tok.rpartition(":")
    if not sep or not name:
        raise ParseError(f"expected <name>:<nic>, got {tok!r}", line)
    try:
        n = int(nic)
    except ValueError:
        raise ParseError(f"bad NIC id in {tok!r}", line) from None
    if not 1 <= n <= 127:
        raise ParseError(f"NIC id {n} outside 1..127", line)
    return name, n


def _options(tokens: list[str], line: int) -> dict:
    opts = {}
    it = iter(tokens)
    for key in it:
        val = next(it, None)
        if val is None:
            raise ParseError(f"option {key!r} needs a value", line)
        try:
            if key == "latency_us":
                opts["latency_us"] = int(val)
                if opts["latency_us"] < 0:
                    raise ValueError
            elif key == "loss":
                opts["loss"] = float(val)
                if not 0.0 <= opts["loss"] <= 1.0:
                    raise ValueError
            else:
                raise ParseError(f"unknown link option {key!r}", line)
        except ValueError:
            raise ParseError(f"bad value {val!r} for {key}", line) from None
    return opts


def parse_topology(text: str) -> TopologySpec:
    spec = TopologySpec()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        kw = tok[0]
        if kw == "node":
            if len(tok) != 6 or tok[2] != "cap":
                raise ParseError("expected: node <name> cap <c> <m> <b>", lineno)
            try:
                cap = tuple(float(v) for v in tok[3:6])
            except ValueError:
                raise ParseError("capability components must be numbers", lineno) from None
            if not all(0.0 <= v <= 1.0 for v in cap):
                raise ParseError("capability components must lie in [0, 1]", lineno)
            if tok[1] in spec.nodes:
                raise ParseError(f"duplicate node {tok[1]!r}", lineno)
            spec.nodes[tok[1]] = (cap, lineno)
        elif kw == "link":
            if len(tok) < 3 or tok[1] not in ("p2p", "shared"):
                raise ParseError("expected: link p2p|shared ...", lineno)
            if tok[1] == "p2p":
                if len(tok) < 4:
                    raise ParseError("p2p link needs two endpoints", lineno)
                ends = [_endpoint(tok[2], lineno), _endpoint(tok[3], lineno)]
                spec.links.append({"kind": "p2p", "name": None, "ends": ends,
                                   "opts": _options(tok[4:], lineno), "line": lineno})
            else:
                if any(l["name"] == tok[2] for l in spec.links):
                    raise ParseError(f"duplicate shared link {tok[2]!r}", lineno)
                spec.links.append({"kind": "shared", "name": tok[2], "ends": [],
                                   "opts": _options(tok[3:], lineno), "line": lineno})
        elif kw == "attach":
            if len(tok) < 3:
                raise ParseError("expected: attach <lname> <name>:<nic> ...", lineno)
            target = next((l for l in spec.links if l["name"] == tok[1]), None)
            if target is None:
                raise DanglingAttachment(f"attach to undeclared link {tok[1]!r}", lineno)
            for t in tok[2:]:
                target["ends"].append(_endpoint(t, lineno) + (lineno,))
        elif kw == "ipmap":
            if len(tok) != 3:
                raise ParseError("expected: ipmap <ipv4> <name>", lineno)
            try:
                ipaddress.IPv4Address(tok[1])
            except ValueError:
                raise ParseError(f"bad IPv4 address {tok[1]!r}", lineno) from None
            spec.ipmap.append((tok[1], tok[2], lineno))
        else:
            raise ParseError(f"unknown directive {kw!r}", lineno)
    _validate(spec)
    return spec


def _validate(spec: TopologySpec) -> None:
    seen: dict[tuple[str, int], int] = {}
    for link in spec.links:
        for end in link["ends"]:
            name, nic = end[0], end[1]
            line = end[2] if len(end) > 2 else link["line"]
            if name not in spec.nodes:
                raise DanglingAttachment(f"unknown node {name!r}", line)
            if (name, nic) in seen:
                raise DuplicateNic(f"{name}:{nic} attached twice (first on line {seen[(name, nic)]})", line)
            seen[(name, nic)] = line
        if len(link["ends"]) < 2:
            raise ParseError(f"link {link['name'] or 'p2p'} needs at least two attachments", link["line"])
    for ip, name, line in spec.ipmap:
        if name not in spec.nodes:
            raise DanglingAttachment(f"ipmap names unknown node {name!r}", line)


def build_network(spec: TopologySpec, seed: int = 0, cfg: Optional[ProtocolConfig] = None) -> Network:
    net = Network(seed, cfg)
    for name, (cap, _) in spec.nodes.items():
        net.add_host(name, cap)
    for i, link in enumerate(spec.links):
        opts = link["opts"]
        if link["kind"] == "p2p":
            (a, na), (b, nb) = link["ends"][0][:2], link["ends"][1][:2]
            net.connect(a, na, b, nb, opts.get("latency_us"), opts.get("loss", 0.0))
        else:
            net.add_link(link["name"], LinkKind.SHARED, opts.get("latency_us"), opts.get("loss", 0.0))
            for end in link["ends"]:
                net.attach(link["name"], end[0], end[1])
    net._ipmap_names = [(ip, name) for ip, name, _ in spec.ipmap]
    net.finalize()
    return net


def load_topology(text: str, seed: int = 0, cfg: Optional[ProtocolConfig] = None, spawn: bool = True) -> Network:
    """Parse a topology file's text and build a network (agents started when ``spawn``)."""
    net = build_network(parse_topology(text), seed, cfg)
    if spawn:
        net.spawn()
    return net
