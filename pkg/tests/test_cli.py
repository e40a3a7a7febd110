import csv
import json

import numpy as np
import pytest
import torch

from longidiff import cli
from longidiff.checkpoint import load_checkpoint

TINY = ["--steps", "3", "--batch-size", "2"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--patients", 40, "--seed", 3, "--out", root / "cohort") == 0
    manifest = root / "cohort" / "manifest.csv"
    assert run("pretrain", "--manifest", manifest, "--out", root / "pre", *TINY) == 0
    pre = root / "pre" / "checkpoint.ckpt"
    assert run("finetune", "--manifest", manifest, "--checkpoint", pre, "--steps", 4, "--out", root / "ft") == 0
    assert run("finetune", "--direct", "--manifest", manifest, "--steps", 4, "--out", root / "dr") == 0
    return {"root": root, "manifest": manifest, "pre": pre, "ft": root / "ft" / "head.ckpt",
            "dr": root / "dr" / "head.ckpt"}


def test_synth_count_and_repeatability(tmp_path):
    assert run("synth", "--patients", 200, "--seed", 7, "--out", tmp_path / "a") == 0
    assert run("synth", "--patients", 200, "--seed", 7, "--out", tmp_path / "b") == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "manifest.csv")))
    assert len({r["patient_id"] for r in rows}) == 200
    assert (tmp_path / "a/manifest.csv").read_bytes() == (tmp_path / "b/manifest.csv").read_bytes()
    assert (tmp_path / "a/phantoms.csv").read_bytes() == (tmp_path / "b/phantoms.csv").read_bytes()


def test_synth_zero_patients_is_usage_error(tmp_path):
    assert run("synth", "--patients", 0, "--out", tmp_path) == cli.EXIT_USAGE


def test_effective_config_printed_and_saved(tmp_path, capsys):
    assert run("synth", "--patients", 2, "--out", tmp_path) == 0
    out = capsys.readouterr().out
    saved = json.loads((tmp_path / "effective_config.json").read_text())
    assert saved["patients"] == 2 and saved["seed"] == 7
    assert '"patients": 2' in out


def test_config_file_precedence(tmp_path):
    ini = tmp_path / "run.ini"
    ini.write_text("[synth]\npatients = 5\nseed = 11\n")
    assert run("synth", "--config", ini, "--patients", 3, "--out", tmp_path / "o") == 0
    saved = json.loads((tmp_path / "o" / "effective_config.json").read_text())
    assert (saved["patients"], saved["seed"]) == (3, 11)


def test_config_unknown_key(tmp_path):
    ini = tmp_path / "bad.ini"
    ini.write_text("[synth]\npatiens = 5\n")
    assert run("synth", "--config", ini, "--out", tmp_path) == cli.EXIT_USAGE
    assert run("synth", "--config", tmp_path / "missing.ini", "--out", tmp_path) == cli.EXIT_USAGE


def test_spatial_strategy_conflict(workspace, tmp_path):
    m = workspace["manifest"]
    assert run("pretrain", "--manifest", m, "--mode", "spatial", "--strategy", "earliest_to_later",
               "--out", tmp_path / "x", *TINY) == cli.EXIT_USAGE
    assert run("pretrain", "--manifest", m, "--mode", "spatial", "--out", tmp_path / "s", *TINY) == 0
    cfg = load_checkpoint(tmp_path / "s" / "checkpoint.ckpt").meta["train_config"]
    assert cfg["strategy"] == "same_time" and cfg["conditioning_mode"] == "spatial"


def test_pretrain_defaults_and_log(workspace):
    meta = load_checkpoint(workspace["pre"]).meta
    assert meta["train_config"]["strategy"] == "earliest_to_later"
    assert meta["train_config"]["conditioning_mode"] == "temporal"
    lines = (workspace["root"] / "pre" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 3


@pytest.mark.parametrize("strategy", ["any_forward", "any_pair"])
def test_pretrain_ablation_flags(workspace, tmp_path, strategy):
    assert run("pretrain", "--manifest", workspace["manifest"], "--strategy", strategy, "--no-augment",
               "--out", tmp_path, *TINY) == 0
    cfg = load_checkpoint(tmp_path / "checkpoint.ckpt").meta["train_config"]
    assert cfg["strategy"] == strategy and cfg["augment"] is False


def test_finetune_defaults_and_epoch_log(workspace):
    meta = load_checkpoint(workspace["ft"]).meta
    assert meta["train_config"]["freeze_steps"] == 0  # round(0.1 * 4)
    assert meta["train_config"]["learning_rate"] == 1e-4
    recs = [json.loads(l) for l in (workspace["root"] / "ft" / "finetune_log.jsonl").read_text().splitlines()]
    assert recs and all("val_auc" in r for r in recs)
    assert load_checkpoint(workspace["dr"]).meta["train_config"]["learning_rate"] == 1e-3
    assert cli.DEFAULTS["finetune"]["freeze_fraction"] == 0.1


def test_finetune_missing_labels(tmp_path):
    assert run("synth", "--patients", 10, "--missing-label-fraction", 1.0, "--out", tmp_path / "c") == 0
    assert run("finetune", "--direct", "--manifest", tmp_path / "c" / "manifest.csv", "--steps", 2,
               "--out", tmp_path / "f") == cli.EXIT_DATA


def test_missing_manifest_is_data_error(tmp_path):
    assert run("pretrain", "--manifest", tmp_path / "none.csv", "--out", tmp_path, *TINY) == cli.EXIT_DATA


def test_missing_required_flag(tmp_path):
    assert run("pretrain", "--out", tmp_path, *TINY) == cli.EXIT_USAGE


def test_eval_report(workspace, tmp_path, capsys):
    assert run("eval", "--manifest", workspace["manifest"], "--checkpoint", workspace["ft"], "--compare",
               workspace["ft"], workspace["dr"], "--n-perm", 100, "--recon-steps", 3, "--out", tmp_path) == 0
    report = json.loads((tmp_path / "metrics.json").read_text())
    for k in ("auc", "acc", "f1", "fid", "mse"):
        assert k in report
    assert report["fid"] is not None and report["mse"] is not None
    assert 0 < report["p_values"]["auc_a_vs_b"] <= 1
    assert len(report["extra"]["split_hash"]) == 16
    assert report["extra"]["split_hash"] in capsys.readouterr().out


def test_eval_compare_needs_two(workspace, tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("eval", "--manifest", workspace["manifest"], "--compare", workspace["ft"], "--out", tmp_path)
    assert exc.value.code == 2


def test_reconstruct_outputs(workspace, tmp_path):
    args = ["reconstruct", "--manifest", workspace["manifest"], "--checkpoint", workspace["pre"],
            "--inputs", "P0001,P0002:0", "--times", "300,600,5000", "--allow-backward", "--steps", 4]
    assert run(*args, "--out", tmp_path / "a") == 0
    files = sorted(p.name for p in (tmp_path / "a").glob("*.pgm"))
    assert len(files) == 6
    rows = list(csv.DictReader(open(tmp_path / "a" / "reconstructions.csv")))
    assert len(rows) == 6
    img = cli.read_pgm_values(tmp_path / "a" / rows[0]["file"])
    assert img.shape == (32, 64)
    # deterministic with a fixed seed, also from a noise start
    for start in ("inverted", "noise"):
        assert run(*args, "--start", start, "--seed", 5, "--out", tmp_path / f"{start}1") == 0
        assert run(*args, "--start", start, "--seed", 5, "--out", tmp_path / f"{start}2") == 0
        for f in files:
            assert (tmp_path / f"{start}1" / f).read_bytes() == (tmp_path / f"{start}2" / f).read_bytes()


def test_reconstruct_backward_guard(workspace, tmp_path):
    args = ["reconstruct", "--manifest", workspace["manifest"], "--checkpoint", workspace["pre"],
            "--inputs", "P0001", "--times", "0", "--steps", 2]
    assert run(*args, "--out", tmp_path / "a") == cli.EXIT_USAGE
    assert run(*args, "--allow-backward", "--out", tmp_path / "b") == 0


def test_reconstruct_unknown_patient(workspace, tmp_path):
    assert run("reconstruct", "--manifest", workspace["manifest"], "--checkpoint", workspace["pre"],
               "--inputs", "NOPE", "--out", tmp_path) == cli.EXIT_DATA


def test_pgm_window_roundtrip(tmp_path):
    img = np.linspace(-4.9, 4.9, 64).reshape(8, 8)
    cli._write_pgm(tmp_path / "x.pgm", img)
    assert np.allclose(cli.read_pgm_values(tmp_path / "x.pgm"), img, atol=10 / 65535)


def test_numerical_failure_exit_code(workspace, tmp_path, monkeypatch):
    import longidiff.trainer as trainer

    def nan_loss(net, encoder, x_a, *a, **k):
        return (encoder(x_a) * float("nan")).mean()

    monkeypatch.setattr(trainer, "loss_simple", nan_loss)
    assert run("pretrain", "--manifest", workspace["manifest"], "--out", tmp_path, *TINY) == cli.EXIT_NUMERIC
    assert (tmp_path / "nan_abort.json").exists()


def test_thread_env(tmp_path, monkeypatch):
    before = torch.get_num_threads()
    monkeypatch.setenv("LONGIDIFF_THREADS", "2")
    try:
        assert run("synth", "--patients", 1, "--out", tmp_path) == 0
        assert torch.get_num_threads() == 2
    finally:
        torch.set_num_threads(before)
