import logging
import math

import numpy as np
import pytest

from contourdet.datasets import AugmentConfig, DatasetSpec, SynthConfig, generate_synthetic
from contourdet.losses import LossWeights
from contourdet.model import BackboneConfig
from contourdet.training import (
    BatchStream,
    RunConfig,
    Stage,
    TrainingDiverged,
    dump_run_config,
    load_checkpoint,
    load_run_config,
    pad_to_multiple,
    predict,
    predict_maps,
    read_training_log,
    train,
)

TINY = BackboneConfig(stage_channels=(8, 8, 16, 16, 32), decoder_channels=(16, 16, 16), input_size=128)


@pytest.fixture(scope="module")
def samples():
    return generate_synthetic(SynthConfig(canvas=128, seed=0, font_scale_range=(10, 18)), 4)


def cfg(variant="cascade2", steps=10, **kw):
    base = dict(variant=variant, backbone=TINY, stages=[Stage(128, steps, 1e-3)], batch_size=2,
                seed=0, checkpoint_every=5)
    base.update(kw)
    return RunConfig(**base)


def test_ten_step_log(samples, tmp_path):
    run = train(cfg(), samples, out_dir=tmp_path)
    rows = read_training_log(run.log_path)
    assert len(rows) == 10 and run.steps == 10
    w = LossWeights()
    for row, rep in zip(rows, run.history):
        assert math.isfinite(float(row["l_total"]))
        assert rep.is_consistent(w)
        recomputed = float(row["l_geo"]) + w.lambda_cls * float(row["l_score"]) + w.beta_contour * float(row["l_contour"])
        assert float(row["l_total"]) == pytest.approx(recomputed, abs=1e-6)
    assert run.checkpoint_path.is_file()


def test_baseline_log_has_no_contour_column(samples, tmp_path):
    run = train(cfg("baseline", steps=3), samples, out_dir=tmp_path)
    rows = read_training_log(run.log_path)
    assert "l_contour" not in rows[0]
    assert all(r.l_contour is None for r in run.history)


def test_resume_continues_trajectory(samples, tmp_path):
    full = train(cfg(steps=10), samples, out_dir=tmp_path / "full")
    train(cfg(steps=5, checkpoint_every=5), samples, out_dir=tmp_path / "half")
    resumed = train(cfg(steps=10), samples, out_dir=tmp_path / "half",
                    resume_from=tmp_path / "half" / "checkpoints" / "last.pt")
    assert resumed.steps == 10
    assert len(resumed.history) == 5
    pre, post = full.history[5].l_total, resumed.history[0].l_total
    assert abs(post - pre) <= 0.1 * abs(pre)
    rows = read_training_log(resumed.log_path)
    assert [int(r["step"]) for r in rows] == list(range(10))


def test_batch_hashes_reproducible(samples):
    a = train(cfg(steps=6), samples)
    b = train(cfg(steps=6), samples)
    assert a.batch_hashes == b.batch_hashes
    c = train(cfg(steps=6, seed=1), samples)
    assert a.batch_hashes != c.batch_hashes


def test_augmented_stream_is_random_access(samples):
    ds = DatasetSpec("", augmentation=AugmentConfig(crop_size=128))
    stream = BatchStream(samples, cfg(dataset=ds), 0)
    first = [stream.batch(k)[0] for k in range(4)]
    again = BatchStream(samples, cfg(dataset=ds), 0).batch(3)[0]
    assert np.array_equal(first[3], again)


def test_epochs_cover_every_sample(samples):
    stream = BatchStream(samples, cfg(), 0)
    seen = stream.indices(0) + stream.indices(1)
    assert sorted(seen) == list(range(len(samples)))


def test_checkpoint_roundtrip_forward(samples, tmp_path):
    run = train(cfg(steps=3), samples, out_dir=tmp_path)
    net, loaded_cfg, payload = load_checkpoint(run.checkpoint_path)
    assert payload["global_step"] == 3 and loaded_cfg.variant == run.model.variant
    img = samples[0].image
    a, b = predict_maps(run.model, img), predict_maps(net, img)
    for key in ("score", "distances", "angle", "contour"):
        assert np.max(np.abs(a[key] - b[key])) <= 1e-6


def test_loss_decreases(samples):
    run = train(cfg("aux2", steps=60), samples)
    totals = [r.l_total for r in run.history]
    assert np.median(totals[30:]) < np.median(totals[:30])


def test_divergence_raises(samples, tmp_path, monkeypatch):
    import contourdet.training as tr

    real = tr.joint_loss

    def poisoned(outputs, targets, weights):
        total, report = real(outputs, targets, weights)
        if report.l_total > 0 and poisoned.calls >= 6:
            raise tr.NonFiniteLossError("l_iou is not finite (nan)")
        poisoned.calls += 1
        return total, report

    poisoned.calls = 0
    monkeypatch.setattr(tr, "joint_loss", poisoned)
    with pytest.raises(TrainingDiverged) as info:
        train(cfg(steps=10), samples, out_dir=tmp_path)
    assert info.value.step == 6
    # the periodic checkpoint from step 5 survives
    _, _, payload = load_checkpoint(tmp_path / "checkpoints" / "last.pt")
    assert payload["global_step"] == 5


def test_predict_untrained_writes_files(samples, tmp_path, caplog):
    run = train(cfg("baseline", steps=1), samples, out_dir=tmp_path / "run")
    odd = np.full((100, 70, 3), 200, np.uint8)
    with caplog.at_level(logging.WARNING):
        dets = predict(run.checkpoint_path, [samples[0].image, odd], out_dir=tmp_path / "pred",
                       names=["a", "b"], overlay=True)
    assert len(dets) == 2
    assert (tmp_path / "pred" / "a.txt").is_file() and (tmp_path / "pred" / "b.txt").is_file()
    assert "overlay flag ignored" in caplog.text
    assert not list((tmp_path / "pred").glob("*.png"))


def test_predict_overlay_for_contour_variant(samples, tmp_path):
    run = train(cfg("aux2", steps=1), samples, out_dir=tmp_path / "run")
    predict(run.checkpoint_path, [samples[0].image], out_dir=tmp_path / "pred", names=["x"], overlay=True)
    assert (tmp_path / "pred" / "x_overlay.png").stat().st_size > 0


def test_pad_to_multiple():
    img, pad = pad_to_multiple(np.zeros((100, 64, 3), np.uint8))
    assert img.shape == (128, 64, 3) and pad == (28, 0)


def test_run_config_yaml_roundtrip(tmp_path):
    c = cfg(dataset=DatasetSpec("data", augmentation=AugmentConfig(crop_size=128)))
    dump_run_config(c, tmp_path / "run.yaml")
    back = load_run_config(tmp_path / "run.yaml")
    assert back.to_dict() == c.to_dict()


def test_run_config_validation():
    with pytest.raises(ValueError):
        Stage(250, 10)
    with pytest.raises(ValueError):
        Stage(256, 0)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"variant": "baseline", "bogus": 1})
    with pytest.raises(ValueError):
        RunConfig(variant="cascade3")
