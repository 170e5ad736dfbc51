import csv
import json
import logging
import subprocess
import sys

import numpy as np
import pytest

from bodylift import cli
from bodylift.checkpoint import LoadedCheckpoint, load_checkpoint
from bodylift.data import compute_norm_stats, load_dataset, stack3d
from bodylift.metrics import mpjpe_p1

TRAIN = ["--width", "16", "--epochs", "2", "--dropout", "0.1"]


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--count", "256", "--seed", "1", "--out", str(d / "train.jsonl")]) == 0
    assert cli.main(["synth", "--count", "40", "--seed", "2", "--out", str(d / "test.jsonl")]) == 0
    ck = d / "model.ckpt"
    assert cli.main(["train", "--labeled", str(d / "train.jsonl"), "--val", str(d / "test.jsonl"),
                     "--out-checkpoint", str(ck), *TRAIN]) == 0
    return d


def test_synth_zero_and_byte_identity(tmp_path):
    assert cli.main(["synth", "--count", "0", "--out", str(tmp_path / "e.jsonl")]) == 0
    assert (tmp_path / "e.jsonl").read_bytes() == b""
    for name in ("a", "b"):
        assert cli.main(["synth", "--count", "10", "--seed", "5", "--skeleton", "h36m17",
                         "--out", str(tmp_path / f"{name}.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    samples = load_dataset(tmp_path / "a.jsonl")
    assert len(samples) == 10 and samples[0].pose2d.shape == (17, 2)


def test_seed_env_default(tmp_path, monkeypatch):
    monkeypatch.setenv("BODYLIFT_SEED", "5")
    cli.main(["synth", "--count", "3", "--out", str(tmp_path / "env.jsonl")])
    cli.main(["synth", "--count", "3", "--seed", "5", "--out", str(tmp_path / "flag.jsonl")])
    assert (tmp_path / "env.jsonl").read_bytes() == (tmp_path / "flag.jsonl").read_bytes()


def test_train_outputs(files):
    assert (files / "model.ckpt").exists()
    rows = list(csv.DictReader((files / "model.ckpt.log.csv").open()))
    vals = [float(r["val_mpjpe"]) for r in rows if r["val_mpjpe"]]
    assert len(vals) == 2 and all(np.isfinite(vals))


def test_semi_without_unlabeled_is_usage_error(files, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--mode", "semi", "--labeled", str(files / "train.jsonl"),
                  "--out-checkpoint", str(files / "x.ckpt")])
    assert exc.value.code == 2
    assert "--unlabeled" in capsys.readouterr().err


def test_semi_without_unlabeled_from_config_is_usage_error(files, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"mode": "semi"}))
    code = cli.main(["train", "--config", str(cfg), "--labeled", str(files / "train.jsonl"),
                     "--out-checkpoint", str(tmp_path / "x.ckpt")])
    assert code == 2


def test_default_lambdas_echoed(files, tmp_path, caplog):
    caplog.set_level(logging.INFO, logger="bodylift")
    cli.main(["train", "--labeled", str(files / "train.jsonl"), "--out-checkpoint",
              str(tmp_path / "l.ckpt"), "--width", "8", "--epochs", "1"])
    line = next(r.getMessage() for r in caplog.records if "resolved config [train]" in r.getMessage())
    resolved = json.loads(line.split(": ", 1)[1])
    w = resolved["weights"]
    assert (w["est"], w["perceptual"], w["rec"], w["disc_unlabeled"], w["perceptual_unlabeled"]) \
        == (10.0, 1.0, 1.0, 0.1, 0.5)
    assert "seed" in resolved


def test_config_file_and_flag_precedence(files, tmp_path, caplog):
    caplog.set_level(logging.INFO, logger="bodylift")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "width": 8, "lr": 0.01, "weights": [1, 2, 3, 4, 5]}))
    cli.main(["train", "--config", str(cfg), "--lr", "0.002", "--labeled", str(files / "train.jsonl"),
              "--out-checkpoint", str(tmp_path / "p.ckpt")])
    line = next(r.getMessage() for r in caplog.records if "resolved config [train]" in r.getMessage())
    resolved = json.loads(line.split(": ", 1)[1])
    assert resolved["lr"] == 0.002 and resolved["epochs"] == 1 and resolved["weights"]["rec"] == 3.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"learning_rate": 1}))
    assert cli.main(["train", "--config", str(bad), "--labeled", str(files / "train.jsonl"),
                     "--out-checkpoint", str(tmp_path / "q.ckpt")]) == 1


class _PerfectStub:
    """Returns the normalized ground truth of whichever 2D pose it is shown."""

    def __init__(self, samples, stats, spec):
        self.spec = spec
        self.table = {}
        for s in samples:
            key = stats.normalize2d(s.pose2d.reshape(-1)).tobytes()
            self.table[key] = stats.normalize3d(s.pose3d.reshape(-1))
        self.stats = stats

    def predict(self, x):
        return np.stack([self.table[row.tobytes()] for row in x])


def test_eval_perfect_stub(files, tmp_path, monkeypatch, capsys):
    samples = load_dataset(files / "test.jsonl")
    real = load_checkpoint(files / "model.ckpt")
    stats = compute_norm_stats(samples)
    stub = _PerfectStub(samples, stats, real.model.spec)
    monkeypatch.setattr(cli, "load_checkpoint", lambda p: LoadedCheckpoint(stub, stats, "", 0))
    out = tmp_path / "r.json"
    assert cli.main(["eval", "--checkpoint", "stub", "--data", str(files / "test.jsonl"),
                     "--protocol", "all", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["mpjpe_p1"] < 1e-9 and rep["mpjpe_p2"] < 1e-9
    assert rep["pck"] == 1.0 and rep["auc"] == pytest.approx(30 / 31)
    assert "ALL" in capsys.readouterr().out


def test_eval_report_consistent_and_deterministic(files, tmp_path):
    outs = []
    for k in range(2):
        p = tmp_path / f"r{k}.json"
        assert cli.main(["eval", "--checkpoint", str(files / "model.ckpt"), "--data",
                         str(files / "test.jsonl"), "--per-action", "--out", str(p)]) == 0
        outs.append(p.read_text())
    assert outs[0] == outs[1]
    rep = json.loads(outs[0])
    pooled = sum(r["mpjpe_p1"] * r["count"] for r in rep["per_action"].values()) / rep["n_samples"]
    assert abs(pooled - rep["mpjpe_p1"]) < 1e-9


def test_predict_roundtrip_and_rescoring(files, tmp_path):
    out = tmp_path / "pred.jsonl"
    assert cli.main(["predict", "--checkpoint", str(files / "model.ckpt"), "--data",
                     str(files / "test.jsonl"), "--out", str(out)]) == 0
    preds, gts = load_dataset(out), load_dataset(files / "test.jsonl")
    assert len(preds) == len(gts)
    P, G = stack3d(preds).reshape(-1, 16, 3), stack3d(gts).reshape(-1, 16, 3)
    assert np.all(P[:, 0] == 0.0)
    rep = tmp_path / "r.json"
    cli.main(["eval", "--checkpoint", str(files / "model.ckpt"), "--data", str(files / "test.jsonl"),
              "--out", str(rep)])
    assert abs(mpjpe_p1(P, G) - json.loads(rep.read_text())["mpjpe_p1"]) < 1e-9


def test_predict_on_2d_only_data(files, tmp_path):
    src = [json.loads(line) for line in (files / "test.jsonl").read_text().splitlines()]
    for r in src:
        r.pop("pose3d")
    (tmp_path / "u.jsonl").write_text("".join(json.dumps(r) + "\n" for r in src))
    assert cli.main(["predict", "--checkpoint", str(files / "model.ckpt"), "--data",
                     str(tmp_path / "u.jsonl"), "--out", str(tmp_path / "p.jsonl")]) == 0
    assert len(load_dataset(tmp_path / "p.jsonl")) == len(src)


@pytest.mark.parametrize("reenc", [False, True])
def test_export_features_rows(files, tmp_path, reenc):
    out = tmp_path / "f.csv"
    args = ["export-features", "--checkpoint", str(files / "model.ckpt"), "--data",
            str(files / "test.jsonl"), "--out", str(out)] + (["--reencoded"] if reenc else [])
    assert cli.main(args) == 0
    rows = list(csv.reader(out.open()))
    assert rows[0][:2] == ["sample_id", "source"] and len(rows[0]) == 2 + 16
    body = rows[1:]
    assert len(body) == (3 if reenc else 2) * 40
    assert {r[1] for r in body} == ({"2d", "3d", "3d-reencoded"} if reenc else {"2d", "3d"})


def test_joint_mismatch_is_runtime_error(files, tmp_path, capsys):
    cli.main(["synth", "--count", "4", "--skeleton", "h36m17", "--out", str(tmp_path / "17.jsonl")])
    code = cli.main(["eval", "--checkpoint", str(files / "model.ckpt"), "--data", str(tmp_path / "17.jsonl")])
    assert code == 1 and "joints" in capsys.readouterr().err


def test_missing_files_exit_1(tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", "x"]) == 1


def test_selfcheck_exit_codes(capsys):
    assert cli.main(["selfcheck"]) == 0
    text = capsys.readouterr().out
    assert "FAIL" not in text and "checks passed" in text
    assert cli.main(["selfcheck", "--inject-fault"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_console_entry_usage_error(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "bodylift.cli", "train", "--mode", "semi",
                           "--labeled", "x", "--out-checkpoint", str(tmp_path / "c")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    proc = subprocess.run([sys.executable, "-m", "bodylift.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
