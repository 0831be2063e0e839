import csv
import json

import numpy as np
import pytest
import yaml

from nosaf import __version__
from nosaf import cli
from nosaf import train as train_mod
from nosaf.graph import Graph, load_bundle, save_bundle
from nosaf.model import ModelConfig, init_params, save_checkpoint


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def bundle(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "g"
    assert cli.main(["generate", "--n", "90", "--k", "3", "--target-h", "0.9", "--seed", "2",
                     "--out", str(path)]) == 0
    return path


QUICK = ["--set", "train.epochs=15", "--set", "model.hidden=8"]


# ---------------------------------------------------------------------------- generate


def test_generate_reports_homophily_and_is_byte_stable(tmp_path, capsys):
    args = ["generate", "--n", "400", "--k", "3", "--target-h", "0.9", "--seed", "1"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    line = capsys.readouterr().out
    h = float(line.split("H=")[1])
    assert 0.85 <= h <= 0.95
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("meta.json", "nodes.tsv", "edges.tsv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    echoed = json.loads((tmp_path / "a" / "config.json").read_text())
    assert echoed["version"] == __version__ and echoed["sbm"]["seed"] == 1
    g, _ = load_bundle(tmp_path / "a")
    assert g.n == 400


def test_generate_rejects_invalid_target(tmp_path, capsys):
    assert cli.main(["generate", "--target-h", "1.5", "--out", str(tmp_path / "x")]) == 2
    assert "target_h" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_generate_uses_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    assert cli.main(["generate", "--n", "30", "--seed", "0"]) == 0
    assert (tmp_path / "root" / "generate" / "meta.json").exists()


# ---------------------------------------------------------------------------- config plumbing


def test_unknown_keys_and_bad_types_are_usage_errors(bundle, capsys):
    assert cli.main(["train", "--bundle", str(bundle), "--set", "model.bogus=1"]) == 2
    assert "model.bogus" in capsys.readouterr().err
    assert cli.main(["train", "--bundle", str(bundle), "--set", "nope.layers=1"]) == 2
    assert cli.main(["train", "--bundle", str(bundle), "--set", "model.layers=deep"]) == 2
    assert cli.main(["train", "--bundle", str(bundle), "--model.variant", "gat"]) == 2
    assert cli.main(["train", "--bundle", str(bundle), "--frobnicate"]) == 2
    assert cli.main(["bogus"]) == 2


def test_config_file_then_overrides(tmp_path, bundle):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"model": {"variant": "res_gcn", "layers": 3, "hidden": 8},
                                   "train": {"epochs": 4, "seeds": [0]},
                                   "data": {"bundle": str(bundle)}}))
    out = tmp_path / "o"
    assert cli.main(["train", "--config", str(cfg), "--set", "model.layers=1",
                     "--out", str(out)]) == 0
    echoed = json.loads((out / "config.json").read_text())
    assert echoed["model"]["variant"] == "res_gcn" and echoed["model"]["layers"] == 1
    assert echoed["model"]["filter_proj"] == 8  # resolved default, not null
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"layer": 3}}))
    assert cli.main(["train", "--config", str(bad)]) == 2
    assert cli.main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2


def test_parse_override_values():
    assert cli.parse_override("model.layers=16") == {"model": {"layers": 16}}
    assert cli.parse_override("train.seeds=[1, 2]") == {"train": {"seeds": [1, 2]}}
    assert cli.parse_override("model.disable_cpm=true") == {"model": {"disable_cpm": True}}
    with pytest.raises(cli.UsageError):
        cli.parse_override("layers=3")
    assert cli.split_bare_overrides(["--model.layers", "4", "--train.lr=0.1"]) == [
        "model.layers=4", "train.lr=0.1"]


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "generate" in capsys.readouterr().out


# ---------------------------------------------------------------------------- train


def test_train_writes_logs_summary_and_line(tmp_path, bundle, capsys):
    out = tmp_path / "t"
    assert cli.main(["train", "--bundle", str(bundle), "--model.variant", "plain_gcn",
                     "--out", str(out)] + QUICK) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    rows = read_csv(out / "summary.csv")
    assert len(rows) == 11 and rows[-1]["seed"] == "aggregate"
    assert list(rows[0]) == train_mod.SUMMARY_COLUMNS
    assert line == (f"plain_gcn L=2 test_acc={float(rows[-1]['test_acc']):.4f}"
                    f"±{float(rows[-1]['test_acc_std']):.4f}")
    assert (out / "summary.csv").read_bytes().count(b"\r\n") == 12
    assert len(list((out / "runs").glob("*.json"))) == 10
    assert len(list((out / "checkpoints").glob("*.json"))) == 10
    log = json.loads((out / "runs" / "seed_3.json").read_text())
    assert log["version"] == __version__ and log["config"]["model"]["variant"] == "plain_gcn"
    assert len(log["epochs"]) == 15


def test_override_round_trips_into_echo(tmp_path, bundle):
    out = tmp_path / "t"
    assert cli.main(["train", "--bundle", str(bundle), "--model.variant", "nosaf_d",
                     "--model.layers", "16", "--set", "train.seeds=[0]",
                     "--out", str(out)] + QUICK[:2]) == 0
    for doc in (json.loads((out / "config.json").read_text()),
                json.loads((out / "runs" / "seed_0.json").read_text())["config"]):
        assert doc["model"]["variant"] == "nosaf_d" and doc["model"]["layers"] == 16


def test_echoed_config_reproduces_outputs(tmp_path, bundle):
    first = tmp_path / "a"
    assert cli.main(["train", "--bundle", str(bundle), "--set", "train.seeds=[4,5]",
                     "--out", str(first)] + QUICK) == 0
    second = tmp_path / "b"
    assert cli.main(["train", "--config", str(first / "config.json"),
                     "--out", str(second)]) == 0
    for rel in ("summary.csv", "runs/seed_4.json", "checkpoints/seed_5.json", "config.json"):
        assert (first / rel).read_bytes() == (second / rel).read_bytes()


def test_seed_flag_shifts_run_seeds(tmp_path, bundle):
    out = tmp_path / "t"
    assert cli.main(["train", "--bundle", str(bundle), "--seed", "7", "--set",
                     "train.seeds=[0,1]", "--out", str(out)] + QUICK) == 0
    assert [r["seed"] for r in read_csv(out / "summary.csv")] == ["7", "8", "aggregate"]


def test_missing_bundle_is_usage_error(tmp_path):
    assert cli.main(["train", "--bundle", str(tmp_path / "none"), "--out", str(tmp_path)]) == 2


def test_runtime_failure_keeps_partial_logs(tmp_path, bundle, monkeypatch):
    real = train_mod.train_once

    def flaky(graph, masks, cfg, seed, adj=None):
        if seed == 1:
            raise FloatingPointError("boom")
        return real(graph, masks, cfg, seed, adj)

    monkeypatch.setattr(train_mod, "train_once", flaky)
    out = tmp_path / "t"
    assert cli.main(["train", "--bundle", str(bundle), "--set", "train.seeds=[0,1,2]",
                     "--out", str(out)] + QUICK) == 1
    assert (out / "runs" / "seed_0.json").exists()
    assert not (out / "summary.csv").exists()


# ---------------------------------------------------------------------------- analyze


def clique_bundle(path):
    edges = [(u, v) for u in range(4) for v in range(u + 1, 4)]
    edges += [(u, v) for u in range(4, 8) for v in range(u + 1, 8)]
    g = Graph(9, edges, np.eye(9)[:, :3], [0] * 4 + [1] * 5, 2, name="cliques")
    save_bundle(g, path)
    return g


def test_analyze_clique_bundle(tmp_path, capsys):
    clique_bundle(tmp_path / "g")
    assert cli.main(["analyze", str(tmp_path / "g"), "--out", str(tmp_path / "a")]) == 0
    report = json.loads((tmp_path / "a" / "analysis.json").read_text())
    assert report["graph_homophily"] == 1.0
    counts = report["histogram"]["counts"]
    assert counts[-1] == 8 and sum(counts) == 8 == 9 - report["isolated_nodes"]
    assert len(counts) == 10 and "H=1.0000" in capsys.readouterr().out
    assert report["config"]["version"] == __version__


def test_analyze_with_checkpoint(tmp_path, bundle):
    ckpt = tmp_path / "ck.json"
    cfg = ModelConfig(variant="nosaf_d", layers=3, hidden=8)
    g, _ = load_bundle(bundle)
    save_checkpoint(ckpt, cfg, init_params(cfg, g.feature_dim, g.num_classes, 0),
                    g.feature_dim, g.num_classes)
    assert cli.main(["analyze", str(bundle), "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / "a")]) == 0
    report = json.loads((tmp_path / "a" / "analysis.json").read_text())
    assert len(report["stage_davg"]) == 4
    assert sum(report["histogram"]["counts"]) + report["isolated_nodes"] == g.n


def test_analyze_rejects_mismatched_checkpoint(tmp_path, bundle, capsys):
    ckpt = tmp_path / "ck.json"
    cfg = ModelConfig(layers=1, hidden=4)
    save_checkpoint(ckpt, cfg, init_params(cfg, 5, 3, 0), 5, 3)
    assert cli.main(["analyze", str(bundle), "--checkpoint", str(ckpt),
                     "--out", str(tmp_path / "a")]) == 2
    assert "feature_dim" in capsys.readouterr().err


# ---------------------------------------------------------------------------- sweep


def sweep_args(bundle, out, *extra):
    return ["sweep", "--bundle", str(bundle), "--out", str(out), "--set", "train.seeds=[0,1,2]",
            "--set", "train.epochs=5", "--set", "model.hidden=8", *extra]


def test_depth_sweep_cardinality_and_resume(tmp_path, bundle, monkeypatch):
    out = tmp_path / "s"
    assert cli.main(sweep_args(bundle, out, "--axis", "depth", "--values", "2,4,8")) == 0
    full = (out / "sweep.csv").read_bytes()
    rows = read_csv(out / "sweep.csv")
    assert len(rows) == 12
    assert sum(r["seed"] == "aggregate" for r in rows) == 3
    assert [r["L"] for r in rows if r["seed"] == "aggregate"] == ["2", "4", "8"]

    # simulate an interrupted run: header, depth-2 cells and aggregate, one depth-4 cell
    text = full.decode().split("\r\n")
    (out / "sweep.csv").write_bytes(("\r\n".join(text[:6]) + "\r\n").encode())
    calls = []
    real = cli.train_once
    monkeypatch.setattr(cli, "train_once", lambda *a, **k: calls.append(a[3]) or real(*a, **k))
    assert cli.main(sweep_args(bundle, out, "--axis", "depth", "--values", "2,4,8")) == 0
    assert len(calls) == 5
    assert (out / "sweep.csv").read_bytes() == full

    calls.clear()
    assert cli.main(sweep_args(bundle, out, "--axis", "depth", "--values", "2,4,8")) == 0
    assert calls == []


def test_sweep_refuses_a_different_config_in_same_dir(tmp_path, bundle):
    out = tmp_path / "s"
    assert cli.main(sweep_args(bundle, out, "--axis", "depth", "--values", "1")) == 0
    assert cli.main(sweep_args(bundle, out, "--axis", "depth", "--values", "1",
                               "--set", "train.lr=0.5")) == 2


def test_variant_sweep_covers_the_ablation_ladder(tmp_path, bundle):
    out = tmp_path / "s"
    labels = "nosaf_d,wo_cpm,wo_cpm_nw,wo_cpm_nw_cb"
    assert cli.main(sweep_args(bundle, out, "--axis", "variant", "--values", labels,
                               "--jobs", "2")) == 0
    agg = [r for r in read_csv(out / "sweep.csv") if r["seed"] == "aggregate"]
    assert [r["variant"] for r in agg] == labels.split(",")
    assert cli.main(sweep_args(bundle, tmp_path / "x", "--axis", "variant",
                               "--values", "gat")) == 2


def test_failed_cells_land_in_error_column(tmp_path, bundle):
    out = tmp_path / "s"
    assert cli.main(sweep_args(bundle, out, "--axis", "depth", "--values", "2,-1")) == 1
    rows = read_csv(out / "sweep.csv")
    bad = [r for r in rows if r["value"] == "-1"]
    good = [r for r in rows if r["value"] == "2"]
    assert all(r["error"] for r in bad) and len(bad) == 4
    assert not any(r["error"] for r in good) and len(good) == 4


def test_homophily_sweep_generates_graphs(tmp_path):
    out = tmp_path / "s"
    assert cli.main(["sweep", "--axis", "homophily", "--values", "0.2,0.8", "--set", "sbm.n=60",
                     "--set", "train.seeds=[0]", "--set", "train.epochs=3", "--set",
                     "model.hidden=8", "--out", str(out), "--svg"]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [r["target_h"] for r in rows] == ["0.2", "0.2", "0.8", "0.8"]
    svg = (out / "accuracy_vs_homophily.svg").read_bytes()
    assert svg.startswith(b"<?xml") and b"<dc:date>" not in svg
