"""Seeded random connected topologies in the topology file format."""

from __future__ import annotations

import random
from collections import defaultdict


def random_topology(n: int, seed: int = 0, extra_edges: float = 0.3, shared_segments: int = -1,
                    shared_latency_us: int | None = None) -> str:
    """Text of a connected ``n``-node topology mixing p2p links and shared segments.

    A random tree guarantees connectivity; roughly ``extra_edges * n`` further
    p2p links add cycles, and ``shared_segments`` (default ``n // 6``) shared
    media each join 3 or 4 random nodes.
    """
    if n < 1:
        raise ValueError("need at least one node")
    rng = random.Random(f"topogen:{n}:{seed}")
    names = [f"n{i:03d}" for i in range(n)]
    next_nic: dict[str, int] = defaultdict(lambda: 1)

    def nic(name: str) -> int:
        v = next_nic[name]
        if v > 127:
            raise ValueError(f"{name} ran out of NIC ids")
        next_nic[name] = v + 1
        return v

    lines = [f"# random topology n={n} seed={seed}"]
    for name in names:
        c, m, b = (round(rng.random(), 3) for _ in range(3))
        lines.append(f"node {name} cap {c} {m} {b}")

    pairs: set[tuple[int, int]] = set()
    for i in range(1, n):
        pairs.add((rng.randrange(i), i))
    for _ in range(int(extra_edges * n)):
        a, b = rng.sample(range(n), 2) if n > 1 else (0, 0)
        if a != b:
            pairs.add((min(a, b), max(a, b)))
    if shared_segments < 0:
        shared_segments = n // 6
    # shared segments replace some tree/extra links so they carry traffic
    segments = []
    for s in range(shared_segments if n >= 3 else 0):
        size = min(n, rng.choice((3, 4)))
        segments.append((f"seg{s}", rng.sample(range(n), size)))

    for a, b in sorted(pairs):
        lines.append(f"link p2p {names[a]}:{nic(names[a])} {names[b]}:{nic(names[b])}")
    for lname, members in segments:
        opt = f" latency_us {shared_latency_us}" if shared_latency_us is not None else ""
        lines.append(f"link shared {lname}{opt}")
        lines.append(f"attach {lname} " + " ".join(f"{names[m]}:{nic(names[m])}" for m in members))
    return "\n".join(lines) + "\n"
