import csv
import json

import numpy as np
import pytest

from advpatch.cli import _chunk_size, main, sha256
from advpatch.data_io import load_checkpoint, load_dataset
from advpatch.evaluation import read_grid_csv, read_pgm, scale_to_u8

ATTACK = ["--suite", "ap-fulllo", "-T", "2", "-r", "2", "--patch-side", "4",
          "--center-side", "8"]


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["make-synth", "--per-class", "4", "--seed", "1", "--out", str(d / "train.aptd")]) == 0
    assert main(["make-synth", "--per-class", "3", "--seed", "2", "--out", str(d / "test.aptd")]) == 0
    assert main(["train", "--data", str(d / "train.aptd"), "--epochs", "2", "--batch-size", "4",
                 "--mode", "occlusion", "--patch-side", "4", "--center-side", "8",
                 "--out", str(d / "model.apck")]) == 0
    return d


def run(files, *argv):
    return main([argv[0], "--model", str(files / "model.apck"), "--data",
                 str(files / "test.aptd"), *argv[1:]])


# --------------------------------------------------------------------------- exit codes

def test_help_and_version(capsys):
    assert main(["--help"]) == 0
    assert main(["--version"]) == 0
    assert "0.1.0" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["eval", "--bogus"],
                                  ["eval", "--out", "x"], ["sweep-size", "--sides", "a,b"]])
def test_usage_errors_exit_1(argv, capsys):
    assert main(argv) == 1
    assert "usage" in capsys.readouterr().err


def test_config_errors_exit_1(files, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"attack": [{"iterations": -3}]}')
    assert run(files, "eval", "--config", str(bad), "--out", str(tmp_path / "o")) == 1
    assert run(files, "eval", "--suite", "default", "-T", "3", "--out", str(tmp_path / "o")) == 1
    assert run(files, "eval", *ATTACK[:-4], "--patch-side", "5", "--center-side", "8",
               "--out", str(tmp_path / "o")) == 1
    assert run(files, "eval", *ATTACK, "--workers", "0", "--out", str(tmp_path / "o")) == 1
    assert main(["train", "--out", str(tmp_path / "m.apck")]) == 1  # no dataset


def test_io_errors_exit_2(files, tmp_path):
    assert main(["eval", "--model", str(tmp_path / "missing.apck"), "--data",
                 str(files / "test.aptd"), *ATTACK, "--out", str(tmp_path / "o")]) == 2
    junk = tmp_path / "junk.aptd"
    junk.write_bytes(b"APTD\0\0")
    assert main(["eval", "--model", str(files / "model.apck"), "--data", str(junk), *ATTACK,
                 "--out", str(tmp_path / "o")]) == 2


# --------------------------------------------------------------------------- outputs

def test_make_synth_and_train_outputs(files):
    batch, meta = load_dataset(files / "train.aptd")
    assert len(batch) == 12 and meta.classes == 3
    man = json.loads((files / "train.manifest.json").read_text())
    assert man["outputs"]["train.aptd"] == sha256(files / "train.aptd")
    assert man["synth"]["per_class"] == 4 and man["seed"] == 1
    params = load_checkpoint(files / "model.apck")
    assert params.arch.input_shape == (16, 16, 3)
    rows = list(csv.DictReader(open(files / "model.csv")))
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    man = json.loads((files / "model.manifest.json").read_text())
    assert man["mode"] == "occlusion" and man["logs"] == ["model.csv"]
    assert man["inputs"]["data"] == sha256(files / "train.aptd")


def test_make_synth_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["make-synth", "--per-class", "2", "--seed", "4",
                     "--out", str(tmp_path / f"{name}.aptd")]) == 0
    assert (tmp_path / "a.aptd").read_bytes() == (tmp_path / "b.aptd").read_bytes()


def test_eval_outputs(files, tmp_path, capsys):
    assert run(files, "eval", *ATTACK, "--seed", "3", "--out", str(tmp_path / "r")) == 0
    assert "RTE" in capsys.readouterr().out
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert 0 <= summary["test_error"] <= summary["robust_test_error"] <= 1
    rows = list(csv.DictReader(open(tmp_path / "r" / "report.csv")))
    assert len(rows) == 9
    man = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert man["command"] == "eval" and man["seed"] == 3
    assert man["arguments"]["iterations"] == 2 and "workers" not in man["arguments"]
    assert man["outputs"]["report.csv"] == sha256(tmp_path / "r" / "report.csv")


def test_eval_workers_and_limit(files, tmp_path):
    for w in ("1", "3"):
        assert run(files, "eval", *ATTACK, "--workers", w, "--limit", "5",
                   "--out", str(tmp_path / w)) == 0
    for f in ("report.csv", "summary.json", "manifest.json"):
        assert (tmp_path / "1" / f).read_bytes() == (tmp_path / "3" / f).read_bytes()
    assert len(list(csv.DictReader(open(tmp_path / "1" / "report.csv")))) == 5


def test_budget_sets_iterations(files, tmp_path):
    assert run(files, "eval", "--suite", "ap-randlo", "--budget", "10", "--patch-side", "4",
               "--center-side", "8", "--limit", "2", "--out", str(tmp_path / "b")) == 0
    man = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert man["arguments"]["budget"] == 10


def test_config_file_drives_suite(files, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"attack": [{"preset": "ap-rand", "iterations": 1,
                                           "patch_side": 4, "center_side": 8}],
                               "data": {"test": str(files / "test.aptd")}}))
    assert main(["attack", "--config", str(cfg), "--model", str(files / "model.apck"),
                 "--out", str(tmp_path / "a")]) == 0
    log = [json.loads(l) for l in open(tmp_path / "a" / "attacks.jsonl")]
    assert len(log) == 9 and all(l["restarts_used"] == 1 for l in log)
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["suite"][0]["scheme"] == "none"


def test_heatmap_outputs(files, tmp_path):
    assert run(files, "heatmap", *ATTACK[:2], "-T", "2", "-r", "5", *ATTACK[6:],
               "--attack-all", "--out", str(tmp_path / "h")) == 0
    h = tmp_path / "h"
    all_cells = read_grid_csv(h / "all.csv")
    ok_cells = read_grid_csv(h / "success.csv")
    assert all_cells[all_cells >= 0].sum() == 9 * 5
    assert np.all(ok_cells <= all_cells)
    assert np.array_equal(read_pgm(h / "all.pgm"), scale_to_u8(np.maximum(all_cells, 0)))


def test_sweeps(files, tmp_path):
    assert run(files, "sweep-size", *ATTACK[:6], "--center-side", "8", "--sides", "2,4",
               "--out", str(tmp_path / "s")) == 0
    lines = (tmp_path / "s" / "sweep_size.csv").read_text().splitlines()
    assert lines[0] == "patch_side,rte" and [l.split(",")[0] for l in lines[1:]] == ["2", "4"]
    assert run(files, "sweep-ablation", *ATTACK, "--iteration-grid", "1,2",
               "--restart-grid", "1,2", "--out", str(tmp_path / "a")) == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "ablation.csv")))
    assert len(rows) == 4


def test_universal(files, tmp_path):
    assert run(files, "universal", "--target", "1", "-T", "3", "--patch-side", "4",
               "--center-side", "8", "--held-out", "3", "--out", str(tmp_path / "u")) == 0
    out = json.loads((tmp_path / "u" / "universal.json").read_text())
    assert out["target"] == 1 and out["held_out"] == 3
    assert 0 <= out["success_rate"] <= 1 and 0 <= out["random_success_rate"] <= 1
    assert out["config"]["scheme"] == "none"
    assert np.array(out["values"]).shape == (4, 4, 3)
    assert run(files, "universal", "--target", "1", "--held-out", "9",
               "--out", str(tmp_path / "v")) == 1


@pytest.mark.parametrize("n, w, size", [(100, 1, 64), (100, 8, 4), (3, 8, 1), (10_000, 2, 64)])
def test_chunk_size(n, w, size):
    assert _chunk_size(n, w) == size
