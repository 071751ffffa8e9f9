"""Shared strategies and topology builders for the test suite."""

import networkx as nx
from hypothesis import strategies as st

from pvh.core import (
    PacketKind,
    ControlMessage,
    MsgType,
    PathVector,
    PvhPacket,
    Tlv,
    p2p,
    shared,
)
from pvh.clustering import Role
from pvh.simnet import Network

# -- hypothesis strategies ----------------------------------------------------

nic_ids = st.integers(min_value=1, max_value=127)
macs = st.binary(min_size=6, max_size=6)
addrs = macs.filter(lambda b: b != b"\xff" * 6)

entries = st.one_of(nic_ids.map(p2p), st.builds(shared, nic_ids, macs))


@st.composite
def path_vectors(draw, max_wire=239):
    hops = draw(st.lists(entries, max_size=40))
    out, size = [], 1
    for h in hops:
        if size + h.wire_size > max_wire:
            break
        out.append(h)
        size += h.wire_size
    return PathVector.from_hops(out)


@st.composite
def pvh_packets(draw):
    pv = draw(path_vectors(max_wire=120))
    fill = draw(st.integers(0, 239 - pv.wire_len))
    rev = draw(st.one_of(st.none(), st.lists(entries, max_size=12).map(tuple)))
    if rev is not None:
        while 16 + pv.wire_len + fill + 1 + sum(e.wire_size for e in rev) > 255:
            if rev:
                rev = rev[:-1]
            else:
                fill = 0
    payload = draw(st.binary(max_size=300))
    return PvhPacket(draw(st.sampled_from(list(PacketKind))), draw(addrs), draw(addrs), pv, payload, rev, fill)


tlv_tags = st.sampled_from(list(Tlv))


@st.composite
def control_messages(draw):
    fields = draw(st.lists(st.tuples(tlv_tags, st.binary(max_size=80)), max_size=8))
    return ControlMessage.build(draw(st.sampled_from(list(MsgType))), *fields)


# -- networks -----------------------------------------------------------------


def line_network(n, seed=0, latency_us=100, spawn=True, cfg=None):
    """Nodes n0..n{n-1} in a chain; node i uses NIC 1 towards i-1 and NIC 2 towards i+1."""
    net = Network(seed, cfg)
    for i in range(n):
        net.add_host(f"n{i}", (0.1 * (i % 10), 0.5, 0.5))
    for i in range(n - 1):
        net.connect(f"n{i}", 2, f"n{i + 1}", 1, latency_us)
    if spawn:
        net.spawn()
    else:
        net.finalize()
    return net


def to_nx(net) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(net.hosts)
    for a, nbrs in net.adjacency().items():
        for b in nbrs:
            g.add_edge(a, b)
    return g


def hop_entry(net, u, v):
    """Path entry that takes a packet from ``u`` to neighbour ``v`` (lowest NIC wins)."""
    for nic in sorted(net.hosts[u].nics):
        link = net.links[net.hosts[u].nics[nic]]
        for node, rnic in link.attachments:
            if node == v:
                if link.kind.value == "shared":
                    return shared(nic, net.hosts[v].macs[rnic])
                return p2p(nic)
    raise KeyError(f"{u} and {v} are not adjacent")


def pv_along(net, path):
    return PathVector.from_hops(hop_entry(net, u, v) for u, v in zip(path, path[1:]))


def ipv4_datagram(src: str, dst: str, payload: bytes, ident: int = 0) -> bytes:
    """Minimal IPv4/UDP-less datagram with a valid header checksum."""
    import ipaddress
    import struct

    hdr = struct.pack("!BBHHHBBH4s4s", 0x45, 0, 20 + len(payload), ident & 0xFFFF, 0, 64, 253, 0,
                      ipaddress.IPv4Address(src).packed, ipaddress.IPv4Address(dst).packed)
    s = sum(struct.unpack("!10H", hdr))
    s = (s & 0xFFFF) + (s >> 16)
    s = (s & 0xFFFF) + (s >> 16)
    return hdr[:10] + struct.pack("!H", ~s & 0xFFFF) + hdr[12:] + payload


def check_invariants(net, x):
    """Return a list of violated clustering properties (empty when all hold)."""
    g = to_nx(net)
    dist = dict(nx.all_pairs_shortest_path_length(g))
    agents = {a.name: a for a in net.agents()}
    by_addr = {a.addr: a for a in agents.values()}
    heads = [a for a in agents.values() if a.membership.role is Role.HEAD]
    bad = []
    for a in agents.values():
        m = a.membership
        if m.role is Role.UNASSIGNED:
            bad.append(f"{a.name} unassigned")
        elif m.role is Role.MEMBER and (m.head_addr not in by_addr
                                        or by_addr[m.head_addr].membership.role is not Role.HEAD):
            bad.append(f"{a.name} member of a non-head")
    for h in heads:
        for k in heads:
            if h is not k and dist[h.name].get(k.name, 99) <= x:
                bad.append(f"heads {h.name},{k.name} within {x}")
        for n, d in dist[h.name].items():
            if 0 < d <= x and (agents[n].capability, agents[n].addr) > (h.capability, h.addr):
                bad.append(f"head {h.name} dominated by {n}")
    for a in agents.values():
        m = a.membership
        if m.role is Role.MEMBER and m.head_addr in by_addr:
            d = dist[a.name][by_addr[m.head_addr].name]
            if d > x + m.join_round:
                bad.append(f"{a.name} at {d} hops, round {m.join_round}")
    return bad


# -- acceptance bookkeeping ---------------------------------------------------

ACCEPTANCE_RESULTS: list[str] = []
