import csv
import io
import json

import pytest

from pvh.cli import main
from pvh.scenario import CSV_COLUMNS, ScenarioConfig


def run_cli(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def rows(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestPingSweep:
    def test_schema(self, capsys):
        code, out, _ = run_cli(capsys, "run", "--topo", "fig_forwarding", "--buckets", "1-2", "--pings", "3")
        assert code == 0
        assert out.splitlines()[0] == ",".join(CSV_COLUMNS)
        rtts = [r for r in rows(out) if r["kind"] == "rtt"]
        assert rtts and all(int(r["value_us"]) > 0 for r in rtts)
        assert {r["hops"] for r in rtts} == {"1", "2"}
        for r in rtts:
            assert r["first"] == ("1" if r["seq"] == "1" else "0")

    def test_same_seed_same_bytes(self, capsys, tmp_path):
        outs = []
        for i in range(2):
            path = tmp_path / f"o{i}.csv"
            assert main(["run", "--topo", "home19", "--seed", "7", "--buckets", "1-3", "--out", str(path)]) == 0
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_skipped_bucket(self, capsys, tmp_path):
        topo = tmp_path / "line.topo"
        topo.write_text("node a cap .5 .5 .5\nnode b cap .4 .4 .4\nnode c cap .3 .3 .3\n"
                        "link p2p a:1 b:1\nlink p2p b:2 c:1\n")
        code, out, _ = run_cli(capsys, "run", "--topo", str(topo), "--buckets", "2,10", "--pings", "2")
        assert code == 0
        assert [r["hops"] for r in rows(out) if r["kind"] == "skipped_bucket"] == ["10"]


class TestErrors:
    def test_bad_topology_line(self, capsys, tmp_path):
        topo = tmp_path / "bad.topo"
        topo.write_text("node a cap .5 .5 .5\nlink p2p a:1 Z:1\n")
        code, _, err = run_cli(capsys, "run", "--topo", str(topo))
        assert code != 0 and "line 2" in err

    def test_missing_file(self, capsys):
        code, _, err = run_cli(capsys, "run", "--topo", "/nonexistent/x.topo")
        assert code != 0 and err.startswith("error:")

    def test_unknown_config_key(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"topo": "home19", "colour": "blue"}))
        code, _, err = run_cli(capsys, "run", "--config", str(cfg))
        assert code == 2 and "colour" in err

    def test_invalid_weights(self, capsys):
        code, _, _ = run_cli(capsys, "run", "--topo", "fig_forwarding", "--weights", "0.5,0.5,0.5")
        assert code == 2

    def test_disconnected_pair_is_reported(self, capsys, tmp_path):
        topo = tmp_path / "split.topo"
        topo.write_text("node a cap .5 .5 .5\nnode b cap .4 .4 .4\nnode c cap .3 .3 .3\n"
                        "link p2p a:1 b:1\nlink p2p b:2 c:1 loss 1.0\n")
        code, out, err = run_cli(capsys, "run", "--topo", str(topo), "--buckets", "1-2", "--pings", "1")
        # the b-c link drops every frame, so c can never be resolved
        assert code == 3 and "unreachable" in err
        bad = {(r["src"], r["dst"]) for r in rows(out) if r["kind"] == "unreachable"}
        assert bad == {("a", "c"), ("c", "a"), ("b", "c"), ("c", "b")}
        assert any(r["kind"] == "rtt" for r in rows(out))

class TestConfig:
    def test_flags_override_file(self, tmp_path):
        from pvh.cli import build_parser, config_from_args
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"topo": "home19", "seed": 3, "x": 1}))
        cfg = config_from_args(build_parser().parse_args(["run", "--config", str(path), "--seed", "9"]))
        assert (cfg.topo, cfg.seed, cfg.x) == ("home19", 9, 1)

    def test_round_trip(self):
        cfg = ScenarioConfig(topo="rand_12", seed=4, exp="service-bench", mode="pull")
        assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


def test_cluster_dump_single_node(capsys, tmp_path):
    topo = tmp_path / "one.topo"
    topo.write_text("node solo cap .3 .3 .3\n")
    code, out, _ = run_cli(capsys, "run", "--topo", str(topo), "--exp", "cluster-dump")
    assert code == 0
    assert out.splitlines()[0].startswith("cluster head=solo")
    assert "size=1" in out.splitlines()[0]


def test_service_bench_rows(capsys):
    code, out, _ = run_cli(capsys, "run", "--topo", "home19", "--exp", "service-bench", "--mode", "pull",
                           "--services", "10", "--queriers", "2")
    assert code == 0
    kinds = {r["kind"] for r in rows(out)}
    assert {"ctrl_tx", "discovery"} <= kinds


def test_gen_topo(capsys, tmp_path):
    out = tmp_path / "r.topo"
    assert main(["gen-topo", "--nodes", "15", "--seed", "2", "--out", str(out)]) == 0
    code, dump, _ = run_cli(capsys, "run", "--topo", str(out), "--exp", "cluster-dump")
    assert code == 0 and "unassigned" not in dump.replace("unassigned=0", "")
