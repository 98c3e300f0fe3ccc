import json
import subprocess
import sys

import pytest

from flowtrack.cli import main

SMALL = {"synth": {"n_sequences": 3, "n_objects": 3, "n_frames": 24, "embed_noise": 0.05},
         "train": {"epochs": 2, "batch_size": 2, "lr": 0.01, "T": 8, "overlap": 2},
         "gradcheck": {"n_graphs": 4, "m_max": 5}}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def pipeline(root, cfg, extra=()):
    assert main(["synth", "--config", cfg, "--out", str(root / "data")]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "run"), *extra]) == 0
    assert main(["track", "--config", cfg, "--data", str(root / "data"),
                 "--checkpoint", str(root / "run" / "checkpoint.json"), "--out", str(root / "res")]) == 0
    assert main(["eval", "--gt", str(root / "data"), "--results", str(root / "res"),
                 "--out", str(root / "ev")]) == 0


def test_pipeline_outputs(tmp_path, cfg_file, capsys):
    pipeline(tmp_path, cfg_file)
    names = sorted(p.name for p in (tmp_path / "data").iterdir() if p.is_dir())
    assert names == ["seq_000", "seq_001", "seq_002"]
    for f in ("det.txt", "gt.txt", "emb.csv", "seqinfo.json"):
        assert (tmp_path / "data" / "seq_000" / f).exists()
    run = tmp_path / "run"
    for f in ("checkpoint.json", "last.json", "trace.csv", "meta.json"):
        assert (run / f).exists()
    assert (run / "trace.csv").read_text().splitlines()[0] == "epoch,step,train_loss,val_loss"
    assert json.loads((run / "meta.json").read_text())["seed"] == 0
    assert sorted(p.name for p in (tmp_path / "res").glob("*.txt")) == [n + ".txt" for n in names]
    out = capsys.readouterr().out
    assert "OVERALL" in out and "mota" in out
    assert (tmp_path / "ev" / "report.csv").exists()


def test_pipeline_deterministic(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    pipeline(a, cfg_file)
    pipeline(b, cfg_file)
    for rel in ("data/seq_001/det.txt", "data/seq_001/emb.csv", "run/checkpoint.json", "run/trace.csv",
                "res/seq_002.txt", "ev/report.csv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_seed_changes_output(tmp_path, cfg_file):
    main(["synth", "--config", cfg_file, "--out", str(tmp_path / "a")])
    main(["synth", "--config", cfg_file, "--seed", "5", "--out", str(tmp_path / "b")])
    assert (tmp_path / "a/seq_000/det.txt").read_bytes() != (tmp_path / "b/seq_000/det.txt").read_bytes()


def test_resume_continues_steps(tmp_path, cfg_file):
    main(["synth", "--config", cfg_file, "--out", str(tmp_path / "data")])
    assert main(["train", "--config", cfg_file, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "r1")]) == 0
    assert main(["train", "--config", cfg_file, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "r2"),
                 "--resume", str(tmp_path / "r1/last.json"), "--train.epochs", "1"]) == 0
    rows = (tmp_path / "r2/trace.csv").read_text().splitlines()[1:]
    epochs = [int(r.split(",")[0]) for r in rows]
    steps = [int(r.split(",")[1]) for r in rows]
    first = json.loads((tmp_path / "r1/meta.json").read_text())["step"]
    # the resumed trace opens with the checkpoint's own row, then continues
    assert (epochs[0], steps[0]) == (2, first)
    assert epochs[-1] == 3 and steps[-1] > first
    assert json.loads((tmp_path / "r2/meta.json").read_text())["step"] == steps[-1]


def test_bce_and_overrides(tmp_path, cfg_file):
    main(["synth", "--config", cfg_file, "--out", str(tmp_path / "data")])
    assert main(["train", "--config", cfg_file, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "r"),
                 "--train.loss_kind", "BCE", "--train.epochs=1"]) == 0
    meta = json.loads((tmp_path / "r/meta.json").read_text())
    assert meta["config"]["train"]["loss_kind"] == "BCE" and meta["config"]["train"]["epochs"] == 1


@pytest.mark.parametrize("args", [
    ["--train.gamma", "0"],
    ["--train.loss_kind", "L3"],
    ["--train.nope", "1"],
    ["--gradcheck.gamma", "-1"],
    ["--synth.miss_rate", "2"],
])
def test_bad_config_rejected(tmp_path, args, capsys):
    assert main(["synth", "--out", str(tmp_path / "x"), *args]) == 2
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_bad_config_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    p.write_text(json.dumps({"train": {"gamma": 0.0}}))
    assert main(["synth", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2


def test_missing_inputs(tmp_path, cfg_file):
    assert main(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 1
    main(["synth", "--config", cfg_file, "--out", str(tmp_path / "data")])
    assert main(["track", "--data", str(tmp_path / "data"), "--checkpoint", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "res")]) == 1
    (tmp_path / "res").mkdir()
    assert main(["eval", "--gt", str(tmp_path / "data"), "--results", str(tmp_path / "res")]) == 1
    assert main(["synth"]) == 1


def test_empty_sequence_gives_empty_results(tmp_path, cfg_file):
    main(["synth", "--config", cfg_file, "--out", str(tmp_path / "data")])
    main(["train", "--config", cfg_file, "--data", str(tmp_path / "data"), "--out", str(tmp_path / "r")])
    empty = tmp_path / "empty" / "seq_e"
    empty.mkdir(parents=True)
    for f in ("det.txt", "gt.txt", "emb.csv"):
        (empty / f).write_text("")
    assert main(["track", "--data", str(empty), "--checkpoint", str(tmp_path / "r/checkpoint.json"),
                 "--out", str(tmp_path / "res")]) == 0
    assert (tmp_path / "res" / "seq_e.txt").read_text() == ""
    assert main(["eval", "--gt", str(empty), "--results", str(tmp_path / "res")]) == 0


def test_gradcheck_command(tmp_path, cfg_file, capsys):
    assert main(["gradcheck", "--config", cfg_file, "--out", str(tmp_path / "g")]) == 0
    assert capsys.readouterr().out.strip().endswith("PASS")
    doc = json.loads((tmp_path / "g/gradcheck.json").read_text())
    assert doc["passed"] and len(doc["per_instance"]) + len(doc["degenerate_instances"]) == 4


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "flowtrack.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("synth", "train", "track", "eval", "gradcheck"):
        assert cmd in r.stdout
