"""Protocol and simulator tunables.  All times are virtual microseconds."""

from __future__ import annotations

from dataclasses import dataclass, fields

MS = 1_000
SEC = 1_000_000


@dataclass
class ProtocolConfig:
    x: int = 2
    weights: tuple[float, float, float] = (0.5, 0.3, 0.2)

    # cluster initialisation
    broadcast_phase_us: int = 3 * SEC
    join_delay_us: int = 1 * SEC
    scan_period_us: int = 2 * SEC
    scan_hop_limit: int = 2
    join_ack_timeout_us: int = 1 * SEC
    head_keepalive_us: int = 10 * SEC

    # maintenance
    hello_interval_us: int = 1 * SEC
    neighbor_expiry_hellos: int = 3
    upload_jitter_us: tuple[int, int] = (1 * SEC, 2 * SEC)
    offline_periods: int = 3

    # routing
    probe_hop_limit: int = 32
    dedup_ttl_us: int = 10 * SEC
    route_ttl_us: int = 30 * SEC
    route_req_timeout_us: int = 500 * MS
    probe_timeout_us: int = 1 * SEC

    # services
    service_mode: str = "cluster"
    push_keepalive_us: int = 10 * SEC
    query_timeout_us: int = 1 * SEC

    # data plane timing
    proc_us: int = 10
    host_us: int = 1000
    ping_timeout_us: int = 1 * SEC
    ping_gap_us: int = 10 * MS

    # clustering on/off (push/pull baselines run without it)
    clustering: bool = True

    @property
    def neighbor_expiry_us(self) -> int:
        return self.neighbor_expiry_hellos * self.hello_interval_us

    @property
    def offline_window_us(self) -> int:
        return self.offline_periods * self.hello_interval_us

    @property
    def join_deadline_us(self) -> int:
        return self.broadcast_phase_us + self.join_delay_us

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


@dataclass
class LinkDefaults:
    p2p_latency_us: int = 100
    shared_latency_us: int = 2000
    loss: float = 0.0


DEFAULT_LINKS = LinkDefaults()
