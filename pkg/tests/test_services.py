import pytest

from pvh.clustering import Role
from pvh.config import MS, SEC
from pvh.scenario import ScenarioConfig, build, cmd_service_bench, converge


def network(mode, topo="home19", seed=1):
    cfg = ScenarioConfig(topo=topo, seed=seed, exp="service-bench", mode=mode)
    net = build(cfg)
    converge(net, cfg)
    return net


def query(net, who, name, wait=3 * SEC):
    out = []
    net.node(who).query_service(name, out.append)
    net.sim.run_while(lambda: not out, net.sim.now + wait)
    return out[0] if out else "pending"


def cluster_peers(net):
    """A member provider, a different member querier and their shared head."""
    for head in net.agents():
        if head.membership.role is not Role.HEAD:
            continue
        members = sorted(a.name for a in net.agents()
                         if a.membership.role is Role.MEMBER and a.membership.head_addr == head.addr)
        if len(members) >= 2:
            return members[0], members[1], head.name
    raise AssertionError("no cluster with two members")


class TestClusterMode:
    def test_query_within_cluster_is_two_legs(self):
        net = network("cluster")
        provider, querier, _ = cluster_peers(net)
        net.node(provider).register_service("printer")
        net.run_for(SEC)
        net.set_stage("q")
        assert query(net, querier, "printer") == net.hosts[provider].addr
        m = net.metrics
        assert m.total("orig:SVC_QUERY", "q") == 1
        assert m.total("orig:SVC_REP", "q") == 1
        assert m.total("orig:PROBE_REQ", "q") == 0

    def test_head_registers_locally(self):
        net = network("cluster")
        _, querier, head = cluster_peers(net)
        net.node(head).register_service("nas")
        assert net.metrics.total("orig:SVC_REG") == 0
        assert query(net, querier, "nas") == net.hosts[head].addr

    def test_other_cluster_resolved_by_probe(self):
        net = network("cluster", topo="fig_cluster_init")
        net.node("f").register_service("lamp")
        net.run_for(SEC)
        net.set_stage("q")
        assert query(net, "g", "lamp") == net.hosts["f"].addr
        assert net.metrics.total("orig:PROBE_REQ", "q") >= 1

    def test_unknown_service(self):
        net = network("cluster")
        assert query(net, "TV", "nothing") is None


class TestPushMode:
    def test_every_cache_holds_service(self):
        net = network("push")
        net.node("NAS").register_service("media")
        net.run_for(SEC)
        for a in net.agents():
            assert a.svc_cache["media"][0] == net.hosts["NAS"].addr

    def test_keepalive_reflood(self):
        net = network("push")
        net.node("NAS").register_service("media")
        net.run_for(SEC)
        net.set_stage("idle")
        net.run_for(net.cfg.push_keepalive_us)
        assert net.metrics.total("orig:SVC_PUSH", "idle", "NAS") == 1

    def test_miss_returns_none(self):
        net = network("push")
        assert query(net, "TV", "absent") is None


class TestPullMode:
    def test_registration_is_silent(self):
        net = network("pull")
        net.node("NAS").register_service("media")
        net.run_for(SEC)
        assert net.metrics.total("ctrl_tx") == 0

    def test_one_flood_one_reply(self):
        net = network("pull")
        net.node("NAS").register_service("media")
        net.set_stage("q")
        assert query(net, "L3", "media") == net.hosts["NAS"].addr
        net.run_for(SEC)
        m = net.metrics
        assert max(m.per_node("orig:SVC_QUERY", "q").values()) == 1
        assert m.total("orig:SVC_REP", "q") == 1

    def test_not_found_after_timeout(self):
        net = network("pull")
        t0 = net.sim.now
        assert query(net, "L3", "nope") is None
        assert net.sim.now - t0 >= net.cfg.query_timeout_us


def test_register_rejects_long_names():
    net = network("pull")
    with pytest.raises(ValueError):
        net.node("TV").register_service("x" * 65)


@pytest.mark.parametrize("mode", ["cluster", "push", "pull"])
def test_bench_small(mode):
    net = network(mode)
    res = cmd_service_bench(net, n_services=20, n_queriers=2, queries_per_querier=3, query_gap_us=20 * MS)
    assert res.queries == 6 and len(res.discovery) == 6
    assert res.not_found == 0
