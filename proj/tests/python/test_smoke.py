import json
import math

import numpy as np
import pytest

import least


def test_config_resolves_presets():
    cfg = least.Config()
    cfg.set("model.preset", "miniature")
    resolved = cfg.resolve()
    assert resolved["model.embed_dim"] == "8"
    assert resolved["model.lead_count"] == "2"
    assert resolved["train.epochs"] == "50"
    assert "seed.pretrain" in resolved


def test_config_errors_are_collected():
    cfg = least.Config()
    cfg.set("train.epochs", "abc")
    cfg.set("synth.count", "-1")
    with pytest.raises(least.LeastError) as e:
        cfg.resolve()
    msg = str(e.value)
    assert "train.epochs" in msg
    assert "synth.count" in msg


def test_synth_record_shapes():
    rec = least.synth_record(seed=3, noise_sigma=0.01)
    assert rec["leads"].shape == (12, 1000)
    assert rec["rate_hz"] == 100.0
    assert len(rec["r_peaks"]) > 5
    assert sorted(rec["label"]) == [0, 1]
    assert rec["survival_days"] > 0


def test_preprocess_record_windows():
    rec = least.synth_record(seed=5, duration_s=20.0)
    out = least.preprocess_record(rec["leads"], rate_hz=100.0, segment_seconds=10.0)
    assert out["rejected"] == 0
    assert len(out["segments"]) == 2
    seg = out["segments"][0]
    assert seg.shape == (12, 1000)
    assert seg.min() >= 0.0 and seg.max() <= 1.0


def test_dft_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 64))
    re, im = least.dft(x)
    ref = np.fft.fft(x, axis=-1)
    assert np.max(np.abs(re - ref.real)) < 1e-9
    assert np.max(np.abs(im - ref.imag)) < 1e-9
    back = least.idft(re, im)
    assert np.max(np.abs(back - x)) < 1e-10

    v = rng.normal(size=48)  # non power of two takes the direct path
    re1, im1 = least.dft(v)
    ref1 = np.fft.fft(v)
    assert np.max(np.abs(re1 - ref1.real)) < 1e-9
    assert np.max(np.abs(im1 - ref1.imag)) < 1e-9


def test_model_encode_and_losses():
    cfg = least.ModelConfig.preset("miniature")
    model = least.Model(cfg, seed=1)
    assert model.parameter_count() > 0
    x = np.random.default_rng(1).normal(size=(2, 2, 32))
    tokens = model.encode(x)
    assert tokens.shape == (16, 8)
    losses = model.pretrain_losses(x, mask_seed=4)
    assert math.isfinite(losses["total"])
    assert abs(losses["total"] - (losses["ssl"] + losses["multi"])) < 1e-12


def test_heads_over_a_fresh_model(tmp_path):
    cfg = least.ModelConfig.preset("miniature")
    model = least.Model(cfg, seed=1)
    head = least.Head.create("classification", embed_dim=8, label_count=2, seed=2)
    x = np.random.default_rng(2).normal(size=(3, 2, 32))
    probs = least.classify(model, head, x)
    assert probs.shape == (3, 2)
    assert np.all((probs > 0.0) & (probs < 1.0))

    att = least.attribution(model, head, x[:1], target=0)
    assert att.shape == (32,)
    assert np.all((att >= 0.0) & (att <= 1.0))

    stem = str(tmp_path / "head")
    head.save(stem)
    again = least.Head.load(stem)
    assert again.kind == "classification"
    assert np.allclose(least.classify(model, again, x), probs)


def test_detect_rpeaks_exact():
    t = np.arange(400.0)
    act = np.zeros(400)
    for c in (50, 150, 250, 350):
        act = np.maximum(act, np.exp(-((t - c) ** 2) / 18.0))
    peaks = least.detect_rpeaks(act.tolist(), 100.0)
    assert peaks == [50, 150, 250, 350]
    score = least.rpeak_metrics(peaks, [50, 150, 250, 350], 100.0)
    assert score["f1"] == 1.0


def test_metric_helpers():
    assert least.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    ci = least.c_index([5.0, 10.0, 15.0], [1, 1, 0], [2.0, 1.0, 0.5])
    assert ci["value"] == 1.0
    scores = np.array([[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.1, 0.6]])
    truth = np.array([[1, 0], [0, 1], [1, 0], [0, 1]], dtype=float)
    rep = least.classification_report(scores, truth)
    assert rep["task"] == "classification"
    assert rep["values"]["accuracy"] == 1.0
    assert rep["counts"]["n_samples"] == 4


def test_cli_runs_in_process(tmp_path):
    out = least.run(["synth", "--set", "synth.count=4", "--out", str(tmp_path / "ds")])
    assert out["code"] == 0, out["stderr"]
    summary = json.loads(out["stdout"])
    assert summary["accepted"] == 4
    assert (tmp_path / "ds" / "manifest.json").exists()

    bad = least.run(["synth", "--set", "nope=1", "--out", str(tmp_path / "x")])
    assert bad["code"] == 1
    assert "unknown config key" in bad["stderr"]


def test_train_roundtrip(tmp_path):
    ds = tmp_path / "ds"
    out = least.run(["synth", "--set", "synth.count=6", "--out", str(ds)])
    assert out["code"] == 0, out["stderr"]
    cfg = least.ModelConfig.preset("tiny")
    pre = least.pretrain(
        str(ds), cfg, batch_size=6, epochs=1, warmup_epochs=0.5, out_dir=str(tmp_path / "pre")
    )
    assert len(pre["loss"]) == 1 and math.isfinite(pre["loss"][0])
    ft = least.finetune(
        pre["checkpoint"],
        "classification",
        str(ds),
        mode="linear_probe",
        batch_size=6,
        epochs=1,
        warmup_epochs=0.5,
        out_dir=str(tmp_path / "ft"),
    )
    model = least.Model.load(ft["model"])
    head = least.Head.load(ft["head"])
    rec = least.synth_record(seed=99, noise_sigma=0.01)
    probs = least.classify(model, head, rec["leads"][None, :, :])
    assert probs.shape == (1, 2)
