"""Experiment drivers shared by the CLI and the acceptance tests."""

from __future__ import annotations

import csv
import io
import json
import logging
import random
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

from .clustering import Role
from .config import MS, SEC, ProtocolConfig
from .errors import Unreachable
from .node import PingSample
from .services import MODES
from .simnet import Network, load_topology
from .topogen import random_topology

log = logging.getLogger(__name__)

CSV_COLUMNS = ("scenario", "seed", "kind", "src", "dst", "hops", "seq", "value_us", "first", "stage")
EXPERIMENTS = ("ping-sweep", "service-bench", "cluster-dump")


@dataclass
class ScenarioConfig:
    topo: str = "home19"
    seed: int = 0
    x: int = 2
    weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    exp: str = "ping-sweep"
    mode: str = "cluster"
    # ping sweep
    buckets: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    pairs_per_bucket: int = 3
    pings_per_pair: int = 5
    # service bench
    n_services: int = 1000
    n_queriers: int = 5
    queries_per_querier: int = 10
    query_gap_ms: int = 20
    # convergence: fixed end time when set, else run until every node joined
    until_ms: Optional[int] = None
    converge_cap_ms: int = 60_000
    timers: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        self.buckets = tuple(int(b) for b in self.buckets)
        if self.exp not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.exp!r}; expected one of {', '.join(EXPERIMENTS)}")
        if self.mode not in MODES:
            raise ValueError(f"unknown service mode {self.mode!r}")
        unknown = set(self.timers) - ProtocolConfig.field_names()
        if unknown:
            raise ValueError(f"unknown timer key(s): {', '.join(sorted(unknown))}")

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return cls(**data)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return asdict(self)

    def protocol(self) -> ProtocolConfig:
        cfg = ProtocolConfig(x=self.x, weights=self.weights, service_mode=self.mode,
                             clustering=(self.exp != "service-bench" or self.mode == "cluster"))
        for key, value in self.timers.items():
            setattr(cfg, key, type(getattr(cfg, key))(value) if not isinstance(value, list) else tuple(value))
        return cfg


def canned_topology(name: str) -> Optional[str]:
    """Text of a shipped topology (``home19``, ``fig_forwarding`` ...) or None."""
    stem = name[:-5] if name.endswith(".topo") else name
    if "/" in stem:
        return None
    res = resources.files("pvh").joinpath("scenarios").joinpath(f"{stem}.topo")
    if res.is_file():
        return res.read_text()
    return None


def resolve_topology(topo: str, seed: int = 0) -> tuple[str, str]:
    """Return ``(scenario name, topology text)`` for a path, canned name or ``rand_N``."""
    path = Path(topo)
    if path.is_file():
        return path.stem, path.read_text()
    stem = path.stem if topo.endswith(".topo") else topo
    if stem.startswith("rand_") and stem[5:].isdigit():
        return stem, random_topology(int(stem[5:]), seed)
    text = canned_topology(topo)
    if text is None:
        raise FileNotFoundError(f"no such topology file or canned scenario: {topo}")
    return stem, text


# ---------------------------------------------------------------------------


def build(cfg: ScenarioConfig, text: Optional[str] = None) -> Network:
    name, body = resolve_topology(cfg.topo, cfg.seed) if text is None else (cfg.topo, text)
    net = load_topology(body, seed=cfg.seed, cfg=cfg.protocol())
    net.name = name
    return net


def converge(net: Network, cfg: ScenarioConfig) -> None:
    """Run cluster formation, then long enough for topology uploads to land."""
    if cfg.until_ms is not None:
        net.run_until(cfg.until_ms * MS)
        return
    pcfg = net.cfg
    if not pcfg.clustering:
        return
    agents = net.agents()
    net.sim.run_while(lambda: not all(a.joined for a in agents), cfg.converge_cap_ms * MS)
    # one hello, the worst-case upload jitter and a hop budget of slack
    settle = pcfg.hello_interval_us + pcfg.upload_jitter_us[1] + 500 * MS
    net.run_until(max(net.sim.now + settle, pcfg.join_deadline_us + settle))


@dataclass
class Row:
    kind: str
    src: str = ""
    dst: str = ""
    hops: int | str = ""
    seq: int | str = ""
    value_us: int | float | str = ""
    first: str = ""
    stage: str = ""


class SkippedBucket(Exception):
    """No node pair exists at the requested hop distance."""


@dataclass
class SweepResult:
    samples: list[PingSample] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)
    unreachable: list[tuple[str, str]] = field(default_factory=list)
    pairs: dict[int, list[tuple[str, str]]] = field(default_factory=dict)
    routing_msgs_steady: int = 0


ROUTING_TYPES = ("ROUTE_REQ", "ROUTE_REP", "PROBE_REQ", "PROBE_REP")


def routing_tx(net: Network, stage: Optional[str] = None) -> int:
    return sum(net.metrics.total(f"tx:{t}", stage) for t in ROUTING_TYPES)


def pick_pairs(net: Network, hops: int, k: int, rng: random.Random) -> list[tuple[str, str]]:
    names, dist = net.hop_matrix()
    cands = [(names[i], names[j]) for i in range(len(names)) for j in range(len(names))
             if i != j and dist[i, j] == hops]
    if not cands:
        raise SkippedBucket(hops)
    return sorted(rng.sample(cands, min(k, len(cands))))


def cmd_ping_sweep(net: Network, buckets=(1, 2, 3, 4, 5, 6), pings_per_pair: int = 5,
                   pairs_per_bucket: int = 3) -> SweepResult:
    """Ping seeded node pairs at each BFS distance in ``buckets``."""
    rng = random.Random(f"sweep:{net.seed}")
    res = SweepResult()
    for h in buckets:
        try:
            res.pairs[h] = pick_pairs(net, h, pairs_per_bucket, rng)
        except SkippedBucket:
            log.info("no pair at distance %d", h)
            res.skipped.append(h)
    net.set_stage("sweep")
    for h in buckets:
        for src, dst in res.pairs.get(h, []):
            session = net.ping(src, dst, pings_per_pair)
            if not session.samples:
                res.unreachable.append((src, dst))
            res.samples.extend(session.samples)
    return res


@dataclass
class BenchResult:
    mode: str
    stage_ctrl: dict[str, int] = field(default_factory=dict)
    per_node: dict[str, dict[str, int]] = field(default_factory=dict)
    discovery: list[tuple[str, str, Optional[str], int]] = field(default_factory=list)
    not_found: int = 0
    queries: int = 0
    query_msgs: int = 0

    @property
    def per_query_msgs(self) -> float:
        return self.query_msgs / self.queries if self.queries else 0.0


DISCOVERY_TYPES = ("SVC_REG", "SVC_PUSH", "SVC_QUERY", "SVC_REP", "PROBE_REQ", "PROBE_REP")
STAGES = ("stage1", "stage2", "stage3")


def cmd_service_bench(net: Network, n_services: int = 1000, n_queriers: int = 5,
                      queries_per_querier: int = 10, query_gap_us: int = 20 * MS) -> BenchResult:
    """Register, idle for one keep-alive period, then query; count control frames per stage.

    Stage 1 starts at time zero so it includes cluster formation in cluster
    mode.  It ends two seconds after the last registration.
    """
    pcfg = net.cfg
    mode = pcfg.service_mode
    rng = random.Random(f"bench:{net.seed}")
    names = sorted(net.hosts)
    res = BenchResult(mode)
    if net.metrics.stage != "stage1":
        net.metrics.stage = "stage1"
        net.metrics.stages[-1] = ("stage1", net.metrics.stages[-1][1])

    services = [f"svc-{i:04d}" for i in range(n_services)]
    t0 = net.sim.now
    for i, svc in enumerate(services):
        provider = rng.choice(names)
        net.sim.schedule_at(t0 + i * MS, net.node(provider).register_service, svc)
    net.run_until(t0 + n_services * MS + 2 * SEC)

    net.set_stage("stage2")
    net.run_for(pcfg.push_keepalive_us)

    net.set_stage("stage3")
    queriers = sorted(rng.sample(names, min(n_queriers, len(names))))
    pending = [0]

    def ask(q: str, svc: str):
        t_start = net.sim.now
        pending[0] += 1

        def done(provider: Optional[bytes]):
            pending[0] -= 1
            pname = net.name_of(provider) if provider is not None else None
            if provider is None:
                res.not_found += 1
            res.discovery.append((q, svc, pname, net.sim.now - t_start))

        net.node(q).query_service(svc, done)

    t3 = net.sim.now
    for qi, q in enumerate(queriers):
        for k in range(queries_per_querier):
            svc = rng.choice(services)
            net.sim.schedule_at(t3 + (k * len(queriers) + qi) * query_gap_us, ask, q, svc)
            res.queries += 1
    t_last = t3 + res.queries * query_gap_us
    net.run_until(t_last)
    budget = pcfg.query_timeout_us + 2 * pcfg.probe_timeout_us
    net.sim.run_while(lambda: pending[0] > 0, t_last + budget)
    net.run_for(100 * MS)

    for stage in STAGES:
        res.stage_ctrl[stage] = net.metrics.total("ctrl_tx", stage)
        res.per_node[stage] = {n: net.metrics.total("ctrl_tx", stage, n) for n in names}
    res.query_msgs = sum(net.metrics.total(f"tx:{t}", "stage3") for t in DISCOVERY_TYPES + ROUTING_TYPES[:2])
    return res


def cmd_cluster_dump(net: Network) -> str:
    """One block per cluster: the head line, then one line per member."""
    lines = []
    agents = {a.name: a for a in net.agents()}
    heads = sorted(n for n, a in agents.items() if a.membership.role is Role.HEAD)
    for h in heads:
        head = agents[h]
        members = sorted(n for n, a in agents.items()
                         if a.membership.role is Role.MEMBER and a.membership.head_addr == head.addr)
        lines.append(f"cluster head={h} capability={head.capability:.4f} size={len(members) + 1}")
        lines.append(f"  {h} role=head join_round=0 distance=0")
        for n in members:
            m = agents[n].membership
            lines.append(f"  {n} role=member join_round={m.join_round} distance={m.pv_to_head.hop_count}")
    orphans = sorted(n for n, a in agents.items() if not a.joined)
    for n in orphans:
        lines.append(f"unassigned {n}")
    dangling = sorted(n for n, a in agents.items()
                      if a.membership.role is Role.MEMBER and net.name_of(a.membership.head_addr) not in heads)
    for n in dangling:
        lines.append(f"orphaned {n} head={net.name_of(agents[n].membership.head_addr)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------


def sweep_rows(res: SweepResult) -> list[Row]:
    rows = [Row("rtt", s.src, s.dst, s.hop_count, s.seq, s.rtt_us, "1" if s.first else "0", "sweep")
            for s in res.samples]
    rows += [Row("skipped_bucket", hops=h, stage="sweep") for h in res.skipped]
    rows += [Row("unreachable", src, dst, stage="sweep") for src, dst in res.unreachable]
    return rows


def bench_rows(res: BenchResult) -> list[Row]:
    rows = []
    for stage in STAGES:
        for n, v in sorted(res.per_node[stage].items()):
            rows.append(Row("ctrl_tx", n, value_us=v, stage=stage))
    for i, (q, svc, provider, lat) in enumerate(res.discovery):
        rows.append(Row("discovery" if provider else "not_found", q, provider or svc, seq=i + 1,
                        value_us=lat, stage="stage3"))
    return rows


def write_csv(rows: list[Row], scenario: str, seed: int, out: Optional[io.TextIOBase] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow((scenario, seed, r.kind, r.src, r.dst, r.hops, r.seq, r.value_us, r.first, r.stage))
    text = buf.getvalue()
    if out is not None:
        out.write(text)
    return text


def run(cfg: ScenarioConfig, text: Optional[str] = None) -> str:
    """Build the network for ``cfg`` and run ``cfg.exp``; return the CSV (or dump) text."""
    net = build(cfg, text)
    if cfg.exp == "service-bench":
        if net.cfg.clustering:
            converge(net, cfg)
        elif cfg.until_ms is not None:
            net.run_until(cfg.until_ms * MS)
        res = cmd_service_bench(net, cfg.n_services, cfg.n_queriers, cfg.queries_per_querier,
                                cfg.query_gap_ms * MS)
        return write_csv(bench_rows(res), net.name, cfg.seed)
    converge(net, cfg)
    if cfg.exp == "cluster-dump":
        return cmd_cluster_dump(net)
    res = cmd_ping_sweep(net, cfg.buckets, cfg.pings_per_pair, cfg.pairs_per_bucket)
    text = write_csv(sweep_rows(res), net.name, cfg.seed)
    if res.unreachable:
        exc = Unreachable(", ".join(f"{a}->{b}" for a, b in res.unreachable))
        exc.output = text
        raise exc
    return text


__all__ = [
    "CSV_COLUMNS", "ScenarioConfig", "SkippedBucket", "SweepResult", "BenchResult",
    "build", "converge", "cmd_ping_sweep", "cmd_service_bench", "cmd_cluster_dump", "run",
    "write_csv", "resolve_topology", "canned_topology",
]
