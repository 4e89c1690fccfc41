import csv
import json

import pytest
import yaml

from wifiloc.cli import main
from wifiloc.ingest import read_dataset

SYNTH = ["--floors", "3", "--width", "24", "--length", "16", "--aps-per-floor", "6",
         "--waypoints-per-floor", "30", "--seed", "2"]
SMALL = ["--target-floor", "F1", "--fraction", "0.2", "--fanout1", "4", "--fanout2", "2",
         "--subgraphs", "2", "--hidden", "8", "--heads", "2", "--embed-dim", "3", "--epochs", "2"]


@pytest.fixture(scope="module")
def site_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("site")
    assert main(["synth", "--out", str(out), *SYNTH]) == 0
    return out


def test_synth_writes_files(site_dir):
    recs = read_dataset(site_dir / "dataset.jsonl")
    assert len(recs) == 90 and {r.floor_id for r in recs} == {"F0", "F1", "F2"}
    assert (site_dir / "ground_truth.jsonl").exists()
    assert json.loads((site_dir / "site.json").read_text())["seed"] == 2


def test_exit_codes(tmp_path, capsys):
    assert main([]) == 1
    assert main(["nonsense"]) == 1
    assert main(["synth"]) == 1
    assert "missing required option" in capsys.readouterr().err
    assert main(["synth", "--out", str(tmp_path), "--floors", "0"]) == 1
    assert main(["pretrain", "--data", str(tmp_path / "none.jsonl"), "--out", "x",
                 "--target-floor", "F0"]) == 1
    assert main(["selftest", "--suite", "nope"]) == 1


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"floors": 1, "aps-per-floor": 3, "waypoints_per_floor": 5,
                                   "width": 10.0, "length": 10.0, "out": str(tmp_path / "a")}))
    assert main(["synth", "--config", str(cfg)]) == 0
    assert len(read_dataset(tmp_path / "a" / "dataset.jsonl")) == 5
    assert main(["synth", "--config", str(cfg), "--waypoints-per-floor", "7",
                 "--out", str(tmp_path / "b")]) == 0
    assert len(read_dataset(tmp_path / "b" / "dataset.jsonl")) == 7
    bad = tmp_path / "bad.yaml"
    bad.write_text("colour: red\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 1


def test_ingest_traces(tmp_path):
    floor = tmp_path / "site" / "F3"
    floor.mkdir(parents=True)
    (floor / "t.txt").write_text("\n".join([
        "1000\tTYPE_WAYPOINT\t3.5\t7.25",
        "1000\tTYPE_WIFI\tnet\taa:01\t-50\t2412\t999",
        "1000\tTYPE_WIFI\tnet\taa:02\t-61\t2412\t999"]) + "\n")
    out = tmp_path / "d.jsonl"
    assert main(["ingest", str(tmp_path / "site"), "--out", str(out),
                 "--stats-out", str(tmp_path / "s.json")]) == 0
    (rec,) = read_dataset(out)
    assert rec.floor_id == "F3" and rec.coord == (3.5, 7.25) and len(rec.readings) == 2
    assert json.loads((tmp_path / "s.json").read_text())
    assert main(["ingest", str(tmp_path / "missing"), "--out", str(out)]) == 1


def test_full_command_chain(site_dir, tmp_path, capsys):
    data = ["--data", str(site_dir / "dataset.jsonl")]
    pre = tmp_path / "pre.ckpt"
    assert main(["pretrain", *data, *SMALL, "--model", "wiagcn", "--out", str(pre)]) == 0
    ft = tmp_path / "ft.ckpt"
    assert main(["finetune", *data, "--checkpoint", str(pre), "--mode", "R", "--epochs", "1",
                 "--out", str(ft)]) == 0
    assert main(["finetune", *data, "--checkpoint", str(pre), "--mode", "D", "--out", "x"]) == 1
    ad = tmp_path / "ad.ckpt"
    log = tmp_path / "adapt.jsonl"
    assert main(["adapt", *data, *SMALL, "--checkpoint", str(pre), "--alpha-step", "0.01",
                 "--log", str(log), "--out", str(ad)]) == 0
    assert len(log.read_text().splitlines()) == 2
    assert main(["build-graphs", *data, *SMALL[:10], "--out", str(tmp_path / "g.pkl")]) == 0
    capsys.readouterr()
    preds = tmp_path / "p.csv"
    assert main(["eval", *data, "--checkpoint", str(ad), "--partition", "test",
                 "--predictions", str(preds)]) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["model"] == "widagcn" and out["mean_error_m"] > 0
    with open(preds, newline="") as fh:
        assert len(list(csv.reader(fh))) == out["n"] + 1
    assert main(["eval", *data, "--model", "knn", "--target-floor", "F1", "--partition", "val"]) == 0
    assert main(["eval", *data, "--checkpoint", str(ad), "--partition", "nope"]) == 1


def test_report_and_from_csv(site_dir, tmp_path):
    exp = tmp_path / "exp.yaml"
    exp.write_text(yaml.safe_dump({
        "dataset": str(site_dir / "dataset.jsonl"), "target_floors": ["F1"], "fractions": [0.2],
        "models": ["knn", "deepsets"], "repeats": 1, "epochs": 2, "set_hidden": 8,
        "embed_dim": 3, "workers": 1, "record_runtime": False}))
    out = tmp_path / "rep"
    assert main(["report", "--experiment", str(exp), "--out-dir", str(out)]) == 0
    assert (out / "results.csv").exists() and (out / "table.csv").exists() and (out / "cdf.csv").exists()
    again = tmp_path / "rep2"
    assert main(["report", "--from-csv", str(out / "results.csv"), "--out-dir", str(again)]) == 0
    assert (again / "table.csv").read_text() == (out / "table.csv").read_text()


def test_selftest_single_suite(capsys):
    assert main(["selftest", "--suite", "grl"]) == 0
    assert capsys.readouterr().out.startswith("PASS grl")


def test_report_exit_two_on_failed_rows(tmp_path):
    exp = tmp_path / "exp.yaml"
    # 1% of 20 target records labels none of them, so that fraction's rows fail
    site = {"floors": 2, "width": 20, "length": 15, "aps_per_floor": 6,
            "waypoints_per_floor": 20, "seed": 0}
    exp.write_text(yaml.safe_dump({
        "site": site, "target_floors": ["F1"], "fractions": [0.01, 0.5], "models": ["knn"],
        "repeats": 1, "workers": 1, "record_runtime": False}))
    assert main(["report", "--experiment", str(exp), "--out-dir", str(tmp_path / "r")]) == 2
    with open(tmp_path / "r" / "failures.csv", newline="") as fh:
        assert len(list(csv.reader(fh))) == 2
    assert len((tmp_path / "r" / "results.csv").read_text().splitlines()) == 2
    # a single floor has no source domain at all
    exp.write_text(yaml.safe_dump({"site": dict(site, floors=1), "models": ["knn"], "workers": 1}))
    assert main(["report", "--experiment", str(exp), "--out-dir", str(tmp_path / "s")]) == 1
