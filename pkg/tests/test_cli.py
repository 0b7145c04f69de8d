import csv
import json
import subprocess
import sys

import pytest

from lfdata.cli import DEFAULTS, config_hash, main

SMALL = {"generator": {"n_regular": 6, "n_overlapping": 3, "n_realtime": 2, "n_portal": 3,
                       "horizon_s": 43200, "n_regions": 3, "n_orgs": 3}}


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def ok(*argv):
    assert main([str(a) for a in argv]) == 0


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "small.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory, small_config):
    out = tmp_path_factory.mktemp("trace")
    ok("gen-trace", "--config", small_config, "--seed", 3, "--out", out)
    return out


@pytest.fixture(scope="module")
def planted_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("planted")
    ok("gen-trace", "--preset", "planted", "--seed", 1, "--out", out)
    return out


def test_gen_trace_outputs_and_manifest(data_dir):
    for name in ("catalog.csv", "users.csv", "recipes.csv", "requests.csv", "ground_truth.json",
                 "manifest.json"):
        assert (data_dir / name).exists(), name
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["command"] == "gen-trace"
    assert manifest["seed"] == 3
    assert manifest["config_hash"] == config_hash(manifest["config"])
    assert set(manifest["versions"]) == {"lfdata", "python", "numpy", "scipy"}
    assert "requests.csv" in manifest["outputs"]


def test_gen_trace_is_byte_identical(tmp_path, small_config, data_dir):
    ok("gen-trace", "--config", small_config, "--seed", 3, "--out", tmp_path)
    for name in ("catalog.csv", "users.csv", "requests.csv", "ground_truth.json"):
        assert (tmp_path / name).read_bytes() == (data_dir / name).read_bytes()


def test_manifest_rerun_reproduces_outputs(tmp_path, data_dir):
    ok("gen-trace", "--config", data_dir / "manifest.json", "--out", tmp_path)
    assert (tmp_path / "requests.csv").read_bytes() == (data_dir / "requests.csv").read_bytes()


def test_classify_and_stats(tmp_path, data_dir):
    ok("classify", "--data-dir", data_dir, "--out", tmp_path)
    patterns = rows(tmp_path / "patterns.csv")
    assert {r["user_id"] for r in patterns} == {r["user_id"] for r in rows(data_dir / "requests.csv")}
    ok("stats", "--data-dir", data_dir, "--out", tmp_path)
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert stats


def test_simulate_writes_metrics_and_placement(tmp_path, data_dir):
    ok("simulate", "--data-dir", data_dir, "--mode", "smart_cache", "--out", tmp_path)
    (metric,) = rows(tmp_path / "metrics.csv")
    assert metric["mode"] == "smart_cache"
    n = len(rows(data_dir / "requests.csv"))
    assert int(metric["requests"]) == n
    assert len(rows(tmp_path / "latencies.csv")) == n
    placement = json.loads((tmp_path / "placement.json").read_text())
    assert placement


def test_simulate_empty_trace(tmp_path, data_dir):
    empty = tmp_path / "empty.csv"
    with open(data_dir / "requests.csv") as fh:
        empty.write_text(fh.readline())
    ok("simulate", "--data-dir", data_dir, "--requests", empty, "--mode", "lru_only", "--out", tmp_path)
    (metric,) = rows(tmp_path / "metrics.csv")
    assert int(metric["requests"]) == 0
    assert float(metric["wan_bytes"]) == 0
    assert rows(tmp_path / "latencies.csv") == []


def test_sweep_modes_by_seeds(tmp_path, small_config):
    ok("sweep", "--config", small_config, "--out", tmp_path)
    table = rows(tmp_path / "metrics.csv")
    assert len(table) == 20
    assert {r["mode"] for r in table} == set(DEFAULTS["modes"])
    by = {(r["mode"], r["seed"]): r for r in table}
    for seed in map(str, DEFAULTS["seeds"]):
        smart = float(by[("smart_cache", seed)]["local_fraction"])
        assert smart >= float(by[("lru_only", seed)]["local_fraction"])
        assert float(by[("no_cache", seed)]["local_fraction"]) == 0.0


def test_sweep_parallel_matches_serial(tmp_path, small_config):
    ok("sweep", "--config", small_config, "--seeds", "0,1", "--modes", "lru_only,smart_cache",
       "--out", tmp_path / "a")
    ok("sweep", "--config", small_config, "--seeds", "0,1", "--modes", "lru_only,smart_cache",
       "--workers", 2, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_report_from_documented_files(tmp_path, data_dir):
    ok("simulate", "--data-dir", data_dir, "--mode", "lru_only", "--out", tmp_path / "sim")
    ok("report", "--inputs", tmp_path / "sim", "--out", tmp_path / "rep")
    (row,) = rows(tmp_path / "rep" / "report_delivery.csv")
    assert row["mode"] == "lru_only" and row["runs"] == "1"
    assert "avg_local_fraction" in row
    assert (tmp_path / "rep" / "report_delivery.txt").read_text().startswith("mode")


def test_ckat_pipeline(tmp_path, planted_dir):
    ok("kg-build", "--data-dir", planted_dir, "--out", tmp_path / "kg")
    doc = json.loads((tmp_path / "kg" / "ckg.json").read_text())
    assert doc["n_items"] == 300
    assert len(rows(tmp_path / "kg" / "ckg_triples.csv")) * 2 == doc["n_edges"]

    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"train": {"epochs": 5}}))
    ok("train", "--data-dir", planted_dir, "--config", cfg, "--out", tmp_path / "t")
    assert len(rows(tmp_path / "t" / "losses.csv")) == 5
    model = tmp_path / "t" / "model"

    ok("recommend", "--checkpoint", model, "--users", "u0000,u0001", "--K", 3, "--out", tmp_path / "r")
    rec = rows(tmp_path / "r" / "rec.csv")
    assert len(rec) == 6
    assert [r["rank"] for r in rec[:3]] == ["1", "2", "3"]

    ok("eval", "--checkpoint", model, "--data-dir", planted_dir, "--out", tmp_path / "e")
    assert [r["model"] for r in rows(tmp_path / "e" / "eval.csv")] == ["ckat", "popularity"]

    ok("train", "--config", tmp_path / "t" / "manifest.json", "--out", tmp_path / "t2")
    for name in ("params.npz", "model.json"):
        assert (model / name).read_bytes() == (tmp_path / "t2" / "model" / name).read_bytes()


def test_combos_and_report(tmp_path, planted_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 1, "d": 4, "k": 4}, "subsets": [["locality"]]}))
    ok("combos", "--data-dir", planted_dir, "--config", cfg, "--seeds", "0", "--attention", "on,off",
       "--out", tmp_path)
    table = rows(tmp_path / "combos.csv")
    assert [(r["sources"], r["attention"]) for r in table] == [("interactions+locality", "1"),
                                                               ("interactions+locality", "0")]
    ok("report", "--inputs", tmp_path / "combos.csv", "--out", tmp_path / "rep")
    assert len(rows(tmp_path / "rep" / "report_combos.csv")) == 2


@pytest.mark.parametrize("argv, code", [
    (["bogus-command"], 2),
    (["simulate", "--no-such-flag"], 2),
    (["simulate", "--mode", "bogus", "--data-dir", "."], 1),
    (["simulate", "--data-dir", "/nonexistent/dir"], 1),
    (["simulate"], 1),
    (["recommend", "--checkpoint", "/nonexistent"], 1),
    (["report", "--inputs", "/nonexistent.csv"], 1),
    (["eval", "--K", "0", "--checkpoint", "x"], 1),
])
def test_error_exit_codes(argv, code, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)] if argv[0] != "bogus-command" else argv) == code
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: kind=")


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    assert main(["gen-trace", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "nonsense" in capsys.readouterr().err


def test_module_entry_point():
    done = subprocess.run([sys.executable, "-m", "lfdata", "--version"], capture_output=True, text=True)
    assert done.returncode == 0
    assert done.stdout.startswith("lfdata ")
