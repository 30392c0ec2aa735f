from __future__ import annotations

import hashlib
import json

import pytest

from solidmark import imgdata as img
from solidmark.cli import EXPERIMENTS, main

TRAIN = ["--epochs", "1", "--channels", "8", "--T", "20", "--batch-size", "8", "--thickness", "2"]
EVAL = ["--steps", "4", "--delta", "0.1", "--delta", "0.005"]


def _digest(d):
    """sha256 per data file, ignoring the log and the recorded command line."""
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_file() and p.name not in ("run.log", "config.json"):
            out[str(p.relative_to(d))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["dataset", "generate", "--out", str(root / "data"), "--count", "8", "--base-size", "8",
                 "--seed", "3"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--seed", "0"] + TRAIN) == 0
    assert main(["evaluate", "--data", str(root / "data"), "--checkpoint", str(root / "run" / "checkpoint.pt"),
                 "--out", str(root / "eval")] + EVAL) == 0
    return root


def test_round_trip_outputs(pipeline):
    ds = img.load_dataset(pipeline / "data", require_keymap=True)
    assert len(ds) == 8 and ds.keymap is not None
    assert (pipeline / "run" / "checkpoint.pt").exists()
    summary = json.loads((pipeline / "eval" / "summary.json").read_text())
    assert summary["n"] == 8
    rows = (pipeline / "eval" / "rows.csv").read_text().splitlines()
    assert len(rows) == 9 and rows[0].startswith("id,true_key")
    cfg = json.loads((pipeline / "eval" / "config.json").read_text())
    assert cfg["command"] == "evaluate" and "version" in cfg


def test_commands_are_deterministic(pipeline, tmp_path):
    data = str(pipeline / "data")
    main(["dataset", "generate", "--out", str(tmp_path / "data"), "--count", "8", "--base-size", "8",
          "--seed", "3"])
    assert _digest(tmp_path / "data") == _digest(pipeline / "data")
    main(["train", "--data", data, "--out", str(tmp_path / "run"), "--seed", "0"] + TRAIN)
    assert _digest(tmp_path / "run") == _digest(pipeline / "run")
    main(["evaluate", "--data", data, "--checkpoint", str(pipeline / "run" / "checkpoint.pt"),
          "--out", str(tmp_path / "eval")] + EVAL)
    assert _digest(tmp_path / "eval") == _digest(pipeline / "eval")


def test_duplicate_manifest_counts(pipeline, tmp_path):
    assert main(["dataset", "duplicate", "--in", str(pipeline / "data"), "--out", str(tmp_path / "dup"),
                 "--first", "2", "--count", "4"]) == 0
    ds = img.load_dataset(tmp_path / "dup")
    assert len(ds) == 8 + 2 * 3
    groups = img.key_groups(ds)
    first = img.load_dataset(pipeline / "data").ids()[:2]
    assert all(len(groups[i]) == 4 for i in first)


def test_augment_and_invalid_thickness(pipeline, tmp_path, capsys):
    assert main(["dataset", "augment", "--in", str(pipeline / "data"), "--out", str(tmp_path / "aug"),
                 "--thickness", "2"]) == 0
    assert img.load_dataset(tmp_path / "aug").pattern.thickness == 2
    rc = main(["dataset", "augment", "--in", str(pipeline / "data"), "--out", str(tmp_path / "bad"),
               "--thickness", "0"])
    assert rc == 1
    assert "thickness" in capsys.readouterr().err


def test_missing_keymap_fails_fast(pipeline, tmp_path, capsys):
    src = pipeline / "data"
    dst = tmp_path / "nokeys"
    dst.mkdir()
    for p in src.iterdir():
        if "key" not in p.name and p.is_file():
            (dst / p.name).write_bytes(p.read_bytes())
    rc = main(["train", "--data", str(dst), "--out", str(tmp_path / "run")] + TRAIN)
    assert rc == 1
    assert "key" in capsys.readouterr().err.lower()
    assert not (tmp_path / "run" / "checkpoint.pt").exists()


def test_unknown_experiment_lists_available(tmp_path, capsys):
    assert main(["experiment", "nonsense", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert all(name in err for name in EXPERIMENTS)


def test_pathology_needs_no_model(tmp_path):
    assert main(["experiment", "pathology", "--out", str(tmp_path / "p")]) == 0
    d = json.loads((tmp_path / "p" / "summary.json").read_text())
    assert d["p95_a"] == d["p95_b"] and d["eidetic_a"] != d["eidetic_b"]
    assert main(["report", str(tmp_path / "p")]) == 0


def test_resume_continues(pipeline, tmp_path):
    data = str(pipeline / "data")
    assert main(["train", "--data", data, "--out", str(tmp_path / "two"), "--seed", "0"]
                + TRAIN[:0] + ["--epochs", "2"] + TRAIN[2:]) == 0
    assert main(["train", "--data", data, "--out", str(tmp_path / "resumed"), "--epochs", "2",
                 "--resume", str(pipeline / "run" / "checkpoint.pt")]) == 0
    a = (tmp_path / "two" / "checkpoint.pt").read_bytes()
    b = (tmp_path / "resumed" / "checkpoint.pt").read_bytes()
    assert hashlib.sha256(a).digest() == hashlib.sha256(b).digest()


def test_experiment_on_checkpoint(pipeline, tmp_path):
    cfg = tmp_path / "mit.json"
    cfg.write_text(json.dumps({"methods": {"gni": [0.0]}}))
    assert main(["experiment", "mitigation", "--config", str(cfg), "--checkpoint",
                 str(pipeline / "run" / "checkpoint.pt"), "--data", str(pipeline / "data"),
                 "--out", str(tmp_path / "m")] + EVAL) == 0
    lines = (tmp_path / "m" / "arms.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["baseline", "gni:0"]
    assert lines[1].split(",")[3:5] == lines[2].split(",")[3:5]
