"""Command-line scenario runner.

    pvh-sim run --topo home19 --seed 42 --exp ping-sweep
    pvh-sim run --topo my.topo --exp service-bench --mode pull --out bench.csv
    pvh-sim run --topo fig_forwarding --exp cluster-dump
    pvh-sim gen-topo --nodes 50 --seed 3 --out rand_50.topo
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .errors import ParseError, PvhError, Unreachable
from .scenario import EXPERIMENTS, ScenarioConfig, run
from .services import MODES
from .topogen import random_topology

log = logging.getLogger("pvh")


def _weights(text: str) -> tuple[float, float, float]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("weights must be three comma-separated numbers a,b,g")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad weights {text!r}") from None


def _buckets(text: str) -> tuple[int, ...]:
    out = []
    for part in text.split(","):
        lo, sep, hi = part.partition("-")
        out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
    return tuple(out)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pvh-sim", description="Path-vector home network simulator")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment and write CSV (or a cluster dump)")
    r.add_argument("--config", type=Path, help="JSON scenario config; flags override its values")
    r.add_argument("--topo", help="topology file, canned name (home19, fig_forwarding, fig_reverse, fig_cluster_init) or rand_N")
    r.add_argument("--seed", type=int)
    r.add_argument("--x", type=int, help="election radius in hops")
    r.add_argument("--weights", type=_weights, help="capability weights a,b,g")
    r.add_argument("--exp", choices=EXPERIMENTS)
    r.add_argument("--mode", choices=MODES, help="service discovery mode for service-bench")
    r.add_argument("--out", type=Path, help="write output here instead of stdout")
    r.add_argument("--until-ms", type=int, help="run cluster formation until this virtual time")
    r.add_argument("--buckets", type=_buckets, help="hop buckets for ping-sweep, e.g. 1-6")
    r.add_argument("--pairs", type=int, dest="pairs_per_bucket")
    r.add_argument("--pings", type=int, dest="pings_per_pair")
    r.add_argument("--services", type=int, dest="n_services")
    r.add_argument("--queriers", type=int, dest="n_queriers")

    g = sub.add_parser("gen-topo", help="write a seeded random connected topology")
    g.add_argument("--nodes", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--extra", type=float, default=0.3, help="extra p2p links per node")
    g.add_argument("--out", type=Path)
    return p


_RUN_KEYS = ("topo", "seed", "x", "weights", "exp", "mode", "until_ms", "buckets",
             "pairs_per_bucket", "pings_per_pair", "n_services", "n_queriers")


def config_from_args(args: argparse.Namespace) -> ScenarioConfig:
    data = json.loads(args.config.read_text()) if args.config else {}
    for key in _RUN_KEYS:
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    return ScenarioConfig.from_dict(data)


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "gen-topo":
        _emit(random_topology(args.nodes, args.seed, args.extra), args.out)
        return 0
    topo = args.topo
    try:
        cfg = config_from_args(args)
        topo = cfg.topo
        text = run(cfg)
    except ParseError as exc:
        print(f"error: {topo}: {exc}", file=sys.stderr)
        return 2
    except Unreachable as exc:
        _emit(getattr(exc, "output", ""), args.out)
        print(f"error: unreachable: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FileNotFoundError, json.JSONDecodeError, PvhError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    _emit(text, args.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
