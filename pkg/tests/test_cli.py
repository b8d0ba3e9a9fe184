import json
import os
from pathlib import Path

import numpy as np
import pytest

from actionsense.backbone import NormStats
from actionsense.cli import run
from actionsense.dataset import LabelVocabulary, load_manifest
from actionsense.mlp import HeadConfig, HeadModel, save_model
from actionsense.synthetic import make_dataset, write_clip


def channel_mean_bundle(path, scale=40.0, backbone="stub"):
    """A hand-set head that predicts the class of the brightest colour channel.

    Layer 1 averages each colour channel of the 7x7x3 stub features; the
    middle layers copy those three values through; the output layer scales
    them into logits (kick=red, punch=green, slap=blue).
    """
    w1 = np.zeros((147, 3))
    for d in range(147):
        w1[d, d % 3] = 1 / 49
    eye = np.eye(3)
    cfg = HeadConfig(147, (3, 3, 3, 3), 3, 0.5)
    model = HeadModel(cfg, [w1, eye, eye, eye, scale * eye], [np.zeros(3)] * 5,
                      LabelVocabulary(), NormStats.identity(147), backbone).quantized()
    save_model(model, path)
    return path


def tree(root):
    return sorted(str(p.relative_to(root)) for p in Path(root).rglob("*"))


@pytest.fixture
def workdir(tmp_path, monkeypatch, synth_decoder_env):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def small_dataset(workdir):
    manifest = make_dataset(workdir / "data", per_class=4, duration_s=2.0, geometry=(96, 54))
    return manifest


def test_predict_four_to_one(workdir, capsys):
    bundle = channel_mean_bundle(workdir / "bundle")
    clip = write_clip(workdir / "clip.synth", [0, 0, 1, 0, 0], seed=4, fps=30, duration_s=5.0)
    code = run(["predict", "--model", str(bundle), "--input", str(clip), "--quiet"])
    out = capsys.readouterr().out.splitlines()
    assert code == 0
    assert out[0] == "kick"
    assert out[1] == "votes: 4/1/0 (kick/punch/slap)"
    assert out[2].startswith("mean_probabilities: kick=")


def test_predict_json(workdir, capsys):
    bundle = channel_mean_bundle(workdir / "bundle")
    clip = write_clip(workdir / "clip.synth", [2, 2, 1], seed=1, fps=30, duration_s=3.0)
    assert run(["predict", "--model", str(bundle), "--input", str(clip), "--format", "json"]) == 0
    data = json.loads(capsys.readouterr().out)
    assert data["predicted_label"] == "slap" and data["vote_counts"] == [0, 1, 2]


def test_train_without_prepare(small_dataset, capsys):
    code = run(["train", "--manifest", str(small_dataset), "--quiet"])
    assert code == 1
    assert "prepare" in capsys.readouterr().err


def test_train_without_manifest(workdir, capsys):
    assert run(["train", "--manifest", "missing.jsonl"]) == 1
    assert "prepare" in capsys.readouterr().err


def test_train_without_extract(small_dataset, capsys):
    assert run(["prepare", "--manifest", str(small_dataset)]) == 0
    capsys.readouterr()
    assert run(["train", "--manifest", str(small_dataset), "--features", "feats"]) == 1
    assert "extract" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert run(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run([]) == 1


def test_io_failure_exit_two(workdir, capsys):
    assert run(["report", "--report", str(workdir / "nope.json")]) == 2
    assert "error" in capsys.readouterr().err


def test_decoder_failure_exit_two(workdir, capsys):
    bundle = channel_mean_bundle(workdir / "bundle")
    bad = workdir / "bad.synth"
    bad.write_text("{}")
    assert run(["predict", "--model", str(bundle), "--input", str(bad)]) == 2


def test_prepare_writes_split(small_dataset, capsys):
    assert run(["prepare", "--manifest", str(small_dataset), "--seed", "5"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("kick: train=")
    m = load_manifest(small_dataset)
    assert m.is_split and m.seed is not None


def test_extract_is_idempotent(small_dataset, capsys):
    base = ["--manifest", str(small_dataset), "--features", "feats", "--quiet"]
    assert run(["prepare", *base]) == 0
    assert run(["extract", *base, "--workers", "3"]) == 0
    first = capsys.readouterr().out
    assert "inferences=24" in first  # 12 two-second clips, two kept frames each
    blobs = {p: (Path("feats") / p).read_bytes() for p in ("features.afv", "index.jsonl", "meta.json")}
    assert run(["extract", *base]) == 0
    second = capsys.readouterr().out
    assert "inferences=0" in second and "extracted=0" in second
    for p, data in blobs.items():
        assert (Path("feats") / p).read_bytes() == data


def test_stages_write_only_declared_outputs(small_dataset, workdir, capsys):
    base = ["--manifest", str(small_dataset), "--features", "feats", "--model", "bundle",
            "--report-dir", "reports", "--epochs", "3", "--quiet"]
    before = set(tree(workdir))
    assert run(["prepare", *base]) == 0
    assert set(tree(workdir)) == before
    assert run(["extract", *base]) == 0
    after = set(tree(workdir))
    assert {p.split(os.sep)[0] for p in after - before} == {"feats"}
    before = after
    assert run(["train", *base]) == 0
    after = set(tree(workdir))
    assert {p.split(os.sep)[0] for p in after - before} == {"bundle"}
    assert {"bundle/model.json", "bundle/weights.bin", "bundle/history.json", "bundle/run-config.json"} <= after
    before = after
    assert run(["evaluate", *base]) == 0
    after = set(tree(workdir))
    assert after - before == {"reports", "reports/report.json", "reports/confusion.csv", "reports/run-config.json"}
    capsys.readouterr()
    assert run(["report", "--report-dir", "reports", "--csv", "cm.csv"]) == 0
    assert "Model performance I" in capsys.readouterr().out
    assert Path("cm.csv").read_text().startswith("true\\predicted,kick,punch,slap")


def test_evaluate_rejects_other_backbone(small_dataset, workdir, capsys):
    base = ["--manifest", str(small_dataset), "--features", "feats", "--quiet"]
    assert run(["prepare", *base]) == 0
    assert run(["extract", *base]) == 0
    channel_mean_bundle(workdir / "bundle", backbone="vgg16")
    capsys.readouterr()
    assert run(["evaluate", *base, "--model", "bundle"]) == 1
    err = capsys.readouterr().err
    assert "vgg16" in err and "stub" in err
