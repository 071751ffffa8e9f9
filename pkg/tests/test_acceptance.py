"""End-to-end acceptance checks, one test per criterion, each under a wall-clock budget."""

import contextlib
import ipaddress
import random
import time

import networkx as nx

from helpers import ACCEPTANCE_RESULTS, check_invariants, ipv4_datagram, pv_along, to_nx
from pvh.cli import main as cli_main
from pvh.clustering import Role
from pvh.config import SEC
from pvh.core import (
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
    p2p,
    shared,
)
from pvh.forwarding import Deliver, Emit, forward_step, reverse_to_pv
from pvh.scenario import ROUTING_TYPES, ScenarioConfig, build, cmd_service_bench, converge, run
from pvh.simnet import load_topology
from pvh.topogen import random_topology


@contextlib.contextmanager
def criterion(number, title, limit_s):
    t0 = time.perf_counter()
    status = "FAIL"
    try:
        yield
        elapsed = time.perf_counter() - t0
        assert elapsed < limit_s, f"took {elapsed:.2f} s, budget {limit_s} s"
        status = "PASS"
    finally:
        elapsed = time.perf_counter() - t0
        line = f"criterion {number}: {status} {title} ({elapsed:.2f} s / {limit_s} s)"
        ACCEPTANCE_RESULTS.append(line)
        print(line)


def converged(topo, seed=0, **kw):
    cfg = ScenarioConfig(topo=topo, seed=seed, **kw)
    net = build(cfg)
    converge(net, cfg)
    return net


def tap_frames(net):
    """Record every frame put on the wire as (time, node, nic, ethertype, payload)."""
    log = []
    emit = net.emit_frame

    def recording(node, nic, dmac, payload, ethertype):
        log.append((net.sim.now, node, nic, ethertype, bytes(payload)))
        return emit(node, nic, dmac, payload, ethertype)

    net.emit_frame = recording
    return log


def capture_delivery(net, name):
    got = []
    net.node(name)._deliver = lambda packet, ctx: got.append(packet)
    return got


# -- 1 ------------------------------------------------------------------------


def rand_entry(rng):
    nic = rng.randint(1, 127)
    return shared(nic, rng.randbytes(6)) if rng.random() < 0.3 else p2p(nic)


def rand_entries(rng, budget):
    out, size = [], 0
    for _ in range(rng.randint(0, 30)):
        e = rand_entry(rng)
        if size + e.wire_size > budget:
            break
        out.append(e)
        size += e.wire_size
    return out


def rand_addr(rng):
    while (a := rng.randbytes(6)) == b"\xff" * 6:
        pass
    return a


def rand_packet(rng):
    pv = PathVector.from_hops(rand_entries(rng, 119))
    fill = rng.randint(0, 239 - pv.wire_len)
    rev = None
    if rng.random() < 0.5:
        room = 255 - 16 - pv.wire_len - fill - 1
        if room < 0:
            fill, room = 0, 255 - 16 - pv.wire_len - 1
        rev = tuple(rand_entries(rng, room))
    return PvhPacket(rng.choice(list(PacketKind)), rand_addr(rng), rand_addr(rng), pv,
                     rng.randbytes(rng.randint(0, 300)), rev, fill)


def rand_control(rng):
    fields = [(rng.choice(list(Tlv)), rng.randbytes(rng.randint(0, 80))) for _ in range(rng.randint(0, 8))]
    return ControlMessage.build(rng.choice(list(MsgType)), *fields)


def test_c1_codec_round_trips():
    with criterion(1, "codec round-trips and 64-octet padding", 10):
        rng = random.Random("acceptance:codec")
        for _ in range(10_000):
            pkt = rand_packet(rng)
            wire = encode_pvh(pkt)
            back = decode_pvh(wire)
            assert back == pkt and encode_pvh(back) == wire
        for _ in range(10_000):
            msg = rand_control(rng)
            wire = encode_control(msg)
            assert decode_control(wire) == msg
            if len(wire) < 64:
                padded = wire + bytes(64 - len(wire))
                assert decode_control(padded) == msg
                assert encode_control(decode_control(padded)) == wire


# -- 2 ------------------------------------------------------------------------


def test_c2_canned_forwarding_and_reverse_routes():
    with criterion(2, "canned forwarding and reverse routes", 1):
        net = converged("fig_forwarding")
        head = net.node("A")
        assert head.membership.role is Role.HEAD
        pv = head.compute_route(net.hosts["A"].addr, net.hosts["E"].addr)
        assert pv.to_bytes() == bytes([2, 2, 3, 0])

        frames = tap_frames(net)
        got = capture_delivery(net, "E")
        net.node("A").send_packet(PvhPacket(PacketKind.RAW, net.hosts["A"].addr, net.hosts["E"].addr, pv, b"fig"))
        net.run_for(SEC)
        hops = [node for _, node, _, et, payload in frames
                if et == ETHERTYPE_DATA and decode_pvh(payload).payload == b"fig"]
        assert hops == ["A", "D", "C"] and len(got) == 1 and got[0].payload == b"fig"

        net = load_topology(_canned("fig_reverse"), spawn=False)
        net.spawn(start=False)
        got = capture_delivery(net, "G")
        path = nx.shortest_path(to_nx(net), "B", "G")
        net.node("B").send_packet(PvhPacket(PacketKind.RAW, net.hosts["B"].addr, net.hosts["G"].addr,
                                            pv_along(net, path), b"", rev=()))
        net.run_for(SEC)
        assert reverse_to_pv(got[0].rev).to_bytes() == bytes([2, 2, 5, 3, 0])


def _canned(name):
    from pvh.scenario import canned_topology
    return canned_topology(name)


# -- 3 ------------------------------------------------------------------------


def brute_force_distance(adj, src, dst):
    """Shortest simple-path length by exhaustive DFS over ``adj``."""
    best = None

    def dfs(u, seen, depth):
        nonlocal best
        if best is not None and depth >= best:
            return
        if u == dst:
            best = depth
            return
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                dfs(v, seen, depth + 1)
                seen.discard(v)

    dfs(src, {src}, 0)
    return best


def walk(net, src, dst, pv):
    """Follow ``pv`` over the ground-truth wiring; return the visited nodes or None if it strays."""
    pkt = PvhPacket(PacketKind.RAW, net.hosts[src].addr, net.hosts[dst].addr, pv)
    node, visited = src, [src]
    for _ in range(pv.hop_count + 1):
        act = forward_step(pkt, set(net.hosts[node].nics), net.hosts[node].addr)
        if isinstance(act, Deliver):
            return visited if node == dst else None
        if not isinstance(act, Emit):
            return None
        reached = net.receivers(node, act.nic, act.dmac)
        if len(reached) != 1:
            return None
        node, pkt = reached[0][0], act.packet
        visited.append(node)
    return None


def test_c3_routing_oracle():
    with criterion(3, "intra-cluster routes shortest and delivering", 60):
        checked, detours = 0, []
        for seed in range(200):
            n = random.Random(f"c3:{seed}").randint(4, 12)
            net = load_topology(random_topology(n, seed), seed=seed)
            converge(net, ScenarioConfig())
            g = to_nx(net)
            for head in net.agents():
                if head.membership.role is not Role.HEAD:
                    continue
                members = sorted(a.name for a in net.agents() if a.membership.head_addr == head.addr)
                adj = {u: sorted(v for v in g[u] if v in members) for u in members}
                for s in members:
                    for t in members:
                        if s == t:
                            continue
                        pv = head.compute_route(net.hosts[s].addr, net.hosts[t].addr)
                        want = brute_force_distance(adj, s, t)
                        if want is None:
                            # joined through another cluster: no intra-cluster path, so resolve must probe
                            assert pv is None, (seed, s, t)
                            detours.append((net, s, t))
                            continue
                        assert pv is not None and pv.hop_count == want, (seed, s, t)
                        assert walk(net, s, t, pv) is not None, (seed, s, t)
                        checked += 1
        assert checked > 0
        for net, s, t in detours:
            out = []
            net.node(s).resolve_route(net.hosts[t].addr, out.append)
            net.sim.run_while(lambda: not out, net.sim.now + 5 * SEC)
            assert out and out[0] is not None and walk(net, s, t, out[0]) is not None, (s, t)
        print(f"{checked} intra-cluster routes checked, {len(detours)} pairs resolved by probe")


# -- 4 ------------------------------------------------------------------------


def test_c4_clustering_invariants():
    with criterion(4, "clustering invariants on 100 topologies", 120):
        failures = {}
        for seed in range(100):
            n = random.Random(f"c4:{seed}").randint(5, 30)
            net = load_topology(random_topology(n, seed), seed=seed)
            converge(net, ScenarioConfig(x=2))
            bad = check_invariants(net, 2)
            if bad:
                failures[seed] = bad
        assert failures == {}


# -- 5 ------------------------------------------------------------------------


def test_c5_probe_economy():
    with criterion(5, "probe relays once per node", 10):
        net = load_topology(random_topology(50, 5), seed=5)
        converge(net, ScenarioConfig())
        nic_total = sum(len(h.nics) for h in net.hosts.values())
        frames = tap_frames(net)
        rng = random.Random("c5")
        heads = {a.name: a.membership.head_addr if a.membership.role is Role.MEMBER else a.addr
                 for a in net.agents()}
        pairs = [(s, t) for s in sorted(heads) for t in sorted(heads) if heads[s] != heads[t]]
        assert pairs
        probes = 0
        for src, dst in rng.sample(pairs, 10):
            start = len(frames)
            out = []
            net.node(src).resolve_route(net.hosts[dst].addr, out.append)
            net.sim.run_while(lambda: not out, net.sim.now + 5 * SEC)
            assert out and out[0] is not None
            bursts = {}
            for at, node, _, et, payload in frames[start:]:
                if et != ETHERTYPE_CONTROL:
                    continue
                msg = decode_control(payload)
                if msg.msg_type is not MsgType.PROBE_REQ:
                    continue
                key = (msg.require(Tlv.ADDR), msg.u32(Tlv.REQUEST_ID))
                bursts.setdefault(key, []).append((node, at))
            for emissions in bursts.values():
                probes += 1
                per_node = {}
                for node, at in emissions:
                    per_node.setdefault(node, set()).add(at)
                assert all(len(times) == 1 for times in per_node.values())
                assert len(emissions) <= nic_total
        assert probes >= 1


# -- 6 ------------------------------------------------------------------------


def test_c6_route_cache_effect():
    with criterion(6, "first ping slower, steady state silent and flat", 30):
        net = converged("home19", seed=42)
        names, dist = net.hop_matrix()
        steady_by_bucket = {}
        for i, src in enumerate(names):
            for j, dst in enumerate(names):
                h = int(dist[i, j])
                if not 1 <= h <= 6:
                    continue
                net.set_stage("first")
                first = net.ping(src, dst, 1).samples
                net.set_stage("steady")
                steady = net.ping(src, dst, 4).samples
                assert len(first) == 1 and len(steady) == 4, (src, dst)
                assert all(first[0].rtt_us > s.rtt_us for s in steady), (src, dst)
                steady_by_bucket.setdefault(h, []).extend(s.rtt_us for s in steady)
        for t in ROUTING_TYPES:
            assert net.metrics.total(f"tx:{t}", "steady") == 0
        assert sorted(steady_by_bucket) == [1, 2, 3, 4, 5, 6]
        mean = {h: sum(v) / len(v) for h, v in steady_by_bucket.items()}
        assert mean[6] / mean[1] < 2.0, mean


# -- 7 ------------------------------------------------------------------------

RING = """
node n0 cap .9 .9 .9
node n1 cap .5 .5 .5
node n2 cap .4 .4 .4
node n3 cap .3 .3 .3
node n4 cap .2 .2 .2
link p2p n0:1 n1:1
link p2p n1:2 n2:1
link p2p n2:2 n3:1
link p2p n3:2 n4:1
link p2p n4:2 n0:2
"""


def test_c7_offline_relay_is_routed_around():
    with criterion(7, "silent relay swept and avoided", 10):
        net = load_topology(RING, seed=1)
        converge(net, ScenarioConfig())
        head = net.node("n0")
        assert all(a.membership.head_addr == head.addr for a in net.agents())
        warm = net.ping("n1", "n3", 2)
        assert [s.hop_count for s in warm.samples] == [2, 2]

        net.silence("n2")
        before = net.ping("n1", "n3", 1)
        assert before.samples == [] and before.failures == [1]
        assert net.hosts["n2"].addr not in head.topology.offline

        cfg = net.cfg
        net.run_for(cfg.offline_window_us + cfg.hello_interval_us + cfg.upload_jitter_us[1])
        assert net.hosts["n2"].addr in head.topology.offline

        after = net.ping("n1", "n3", 3)
        assert len(after.samples) == 3 and all(s.hop_count == 3 for s in after.samples)
        live = ["n0", "n1", "n3", "n4"]
        for s in live:
            for t in live:
                if s != t:
                    pv = head.compute_route(net.hosts[s].addr, net.hosts[t].addr)
                    path = walk(net, s, t, pv)
                    assert path is not None and "n2" not in path


# -- 8 ------------------------------------------------------------------------


def test_c8_service_bench_shape():
    with criterion(8, "service-bench orderings over 5 seeds", 60):
        for seed in range(1, 6):
            res = {}
            for mode in ("push", "cluster", "pull"):
                cfg = ScenarioConfig(topo="home19", seed=seed, exp="service-bench", mode=mode)
                net = build(cfg)
                if net.cfg.clustering:
                    converge(net, cfg)
                res[mode] = cmd_service_bench(net, 1000, 5, cfg.queries_per_querier, cfg.query_gap_ms * 1000)
            s1 = {m: r.stage_ctrl["stage1"] for m, r in res.items()}
            s2 = {m: r.stage_ctrl["stage2"] for m, r in res.items()}
            assert s1["push"] > s1["cluster"] > s1["pull"], (seed, s1)
            assert s2["push"] > s2["cluster"] > s2["pull"] and s2["pull"] == 0, (seed, s2)
            assert res["cluster"].per_query_msgs <= res["pull"].per_query_msgs, seed
            assert all(r.not_found == 0 for r in res.values()), seed


# -- 9 ------------------------------------------------------------------------


def test_c9_determinism(tmp_path):
    with criterion(9, "byte-identical reruns", 30):
        configs = [
            ScenarioConfig(topo="home19", seed=11),
            ScenarioConfig(topo="rand_25", seed=3, exp="cluster-dump"),
            ScenarioConfig(topo="home19", seed=11, exp="cluster-dump"),
            ScenarioConfig(topo="home19", seed=4, exp="service-bench", mode="cluster", n_services=100),
        ]
        for cfg in configs:
            assert run(cfg) == run(cfg), cfg
        outs = []
        for i in range(2):
            path = tmp_path / f"sweep{i}.csv"
            assert cli_main(["run", "--topo", "home19", "--seed", "5", "--out", str(path)]) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]


# -- 10 -----------------------------------------------------------------------


def test_c10_tunnel_transparency():
    with criterion(10, "IPv4 datagrams byte-identical across the tunnel", 10):
        net = converged("home19", seed=42)
        names, dist = net.hop_matrix()
        targets = {"192.168.1.10": "PC1", "192.168.1.11": "PC2", "192.168.1.20": "NB1"}
        for name in targets.values():
            assert dist[names.index("L3"), names.index(name)] >= 3
        rng = random.Random("c10")
        sent = {name: [] for name in targets.values()}
        src = net.node("L3")
        for i in range(1000):
            dst_ip = rng.choice(sorted(targets))
            src_ip = str(ipaddress.IPv4Address(rng.getrandbits(32)))
            dgram = bytearray(ipv4_datagram(src_ip, dst_ip, rng.randbytes(rng.randint(0, 1400)), i))
            dgram[1], dgram[8], dgram[9] = rng.getrandbits(8), rng.randint(1, 255), rng.getrandbits(8)
            sent[targets[dst_ip]].append(bytes(dgram))
            src.tun.outbound.append(bytes(dgram))
        assert src.pump_tun() == 1000
        net.run_for(5 * SEC)
        for name, dgrams in sent.items():
            assert net.node(name).tun.received == dgrams
