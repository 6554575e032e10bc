import csv
import hashlib
import json
import time

import numpy as np
import pytest

from netparafac import cli
from netparafac.datagen import MINUTES, TRAFFIC_METRICS


def run(*argv):
    return cli.main([str(a) for a in argv])


def digests(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != "timing.csv"}


def test_generate_tiny_dataset(tmp_path):
    out = tmp_path / "gen"
    assert run("generate", "--out", out, "--kind", "traffic", "--users", 2, "--days", 2, "--q", 0.5) == 0
    with open(out / "traffic.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * MINUTES * len(TRAFFIC_METRICS)
    assert {r["metric"] for r in rows} == set(TRAFFIC_METRICS)
    doc = json.loads((out / "run.json").read_text())
    assert doc["config"]["users"] == 2 and {"numpy", "scipy", "python"} <= set(doc["versions"])


def test_generate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("generate", "--out", tmp_path / name, "--users", 2, "--days", 2, "--q", 0.5,
                   "--branching", "2", "--users-per-leaf-node", 2) == 0
    a, b = digests(tmp_path / "a"), digests(tmp_path / "b")
    a.pop("run.json"), b.pop("run.json")  # records its own output path
    assert a == b and "qos.csv" in a


@pytest.mark.parametrize("cmd", ["generate", "fit", "validate-rank", "stream", "detect", "cluster", "report"])
def test_help_lists_flags(cmd, capsys):
    with pytest.raises(SystemExit) as e:
        run(cmd, "--help")
    assert e.value.code == 0
    text = capsys.readouterr().out
    parser = cli.build_parser()
    sub = parser._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in text


def test_invalid_config_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"userz": 3}))
    assert run("generate", "--out", tmp_path / "x", "--config", bad) == cli.EXIT_USAGE
    assert "userz" in capsys.readouterr().err
    bad.write_text(json.dumps({"window": 0}))
    assert run("stream", "--out", tmp_path / "x", "--traffic", bad, "--config", bad) == cli.EXIT_USAGE
    assert "window" in capsys.readouterr().err


def test_config_values_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"users": 3, "days": 1, "kind": "traffic", "q": 0.5}))
    assert run("generate", "--out", tmp_path / "g", "--config", cfg, "--days", 2) == 0
    doc = json.loads((tmp_path / "g" / "run.json").read_text())
    assert doc["config"]["users"] == 3 and doc["config"]["days"] == 2


def test_exit_codes(tmp_path):
    with pytest.raises(SystemExit) as e:
        run("nonsense")
    assert e.value.code == cli.EXIT_USAGE
    assert run("fit", "--out", tmp_path / "f", "--traffic", tmp_path / "missing.csv") == cli.EXIT_DATA
    broken = tmp_path / "broken.csv"
    broken.write_text("a,b\n1,2\n")
    assert run("fit", "--out", tmp_path / "f", "--traffic", broken) == cli.EXIT_DATA
    assert run("generate", "--out", tmp_path / "g", "--users", -1) == cli.EXIT_USAGE


def test_numeric_failure_exit_code(tmp_path, monkeypatch):
    def boom(args, out):
        raise np.linalg.LinAlgError("SVD did not converge")
    monkeypatch.setattr(cli, "cmd_generate", boom)
    assert run("generate", "--out", tmp_path / "g") == cli.EXIT_NUMERIC


def test_tiny_end_to_end_under_a_minute(tmp_path):
    t0 = time.perf_counter()
    g = tmp_path / "gen"
    assert run("generate", "--out", g, "--users", 20, "--days", 4, "--q", 0.25, "--seed", 3,
               "--attacks-per-day", 3, "--branching", "2,2", "--users-per-leaf-node", 4,
               "--outage-day", 2, "--loss-day", 3) == 0
    traffic = g / "traffic.csv"
    assert run("fit", "--out", tmp_path / "fit", "--traffic", traffic, "--train-days", 1) == 0
    assert run("validate-rank", "--out", tmp_path / "vr", "--traffic", traffic, "--ranks", "1,2") == 0
    assert run("stream", "--out", tmp_path / "st", "--traffic", traffic, "--window", 60,
               "--max-steps", 20) == 0
    assert run("detect", "--out", tmp_path / "det", "--traffic", traffic, "--ground-truth",
               g / "ground_truth.csv", "--split", "1,2,1", "--trees", 10, "--q", 0.25) == 0
    assert run("cluster", "--out", tmp_path / "cl", "--qos", g / "qos.csv", "--topology",
               g / "topology.json", "--k-range", "1,6", "--max-iters", 30) == 0
    assert run("report", "--out", tmp_path / "rep", "--detect-dir", tmp_path / "det",
               "--cluster-dir", tmp_path / "cl") == 0
    assert time.perf_counter() - t0 < 60

    for sub in ("fit", "vr", "st", "det", "cl", "rep"):
        doc = json.loads((tmp_path / sub / "run.json").read_text())
        for inp in doc["inputs"].values():
            assert len(inp["sha256"]) == 64
    with open(tmp_path / "st" / "timing.csv", newline="") as fh:
        assert len(list(csv.DictReader(fh))) == 20
    with open(tmp_path / "st" / "residuals.csv", newline="") as fh:
        assert sum(1 for _ in csv.DictReader(fh)) == 20 * 20 * 4
    rep = json.loads((tmp_path / "det" / "report.json").read_text())
    assert rep["eight_features"]["n_attacks"] > 0
    with open(tmp_path / "det" / "verdicts.csv", newline="") as fh:
        assert sum(1 for _ in csv.DictReader(fh)) == MINUTES
    text = (tmp_path / "rep" / "report.txt").read_text()
    assert "eight_features" in text and "decide attack when >= 5" in text

    # identical configuration, identical outputs (timings excluded)
    again = tmp_path / "det2"
    assert run("detect", "--out", again, "--traffic", traffic, "--ground-truth",
               g / "ground_truth.csv", "--split", "1,2,1", "--trees", 10, "--q", 0.25) == 0
    a, b = digests(tmp_path / "det"), digests(again)
    a.pop("run.json"), b.pop("run.json")
    assert a == b
