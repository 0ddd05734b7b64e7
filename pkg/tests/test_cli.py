import hashlib
from pathlib import Path

import numpy as np
import pytest
import yaml

from contourdet.cli import run
from contourdet.datasets import SynthConfig, generate_synthetic, parse_icdar_gt, save_dataset
from contourdet.geometry import Detection
from contourdet.postprocess import write_predictions


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    save_dataset(generate_synthetic(SynthConfig(canvas=128, seed=3, font_scale_range=(10, 18)), 2), root)
    return root


def perfect_predictions(dataset, out):
    out.mkdir(parents=True, exist_ok=True)
    for gt in sorted((dataset / "gt").glob("*.txt")):
        write_predictions(out / gt.name, [Detection(i.quad, 1.0) for i in parse_icdar_gt(gt)])
    return out


def digest_tree(root: Path) -> dict:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_eval_perfect_predictions(dataset, tmp_path, capsys):
    pred = perfect_predictions(dataset, tmp_path / "pred")
    assert run(["eval", "--pred-dir", str(pred), "--gt-dir", str(dataset / "gt")]) == 0
    out = capsys.readouterr().out
    assert "P=1.000 R=1.000 F1=1.000" in out
    assert "0.50,1.0000,1.0000,1.0000" in out


def test_sweep_table_and_plot(dataset, tmp_path):
    pred = perfect_predictions(dataset, tmp_path / "pred")
    table = tmp_path / "sweep.csv"
    assert run(["sweep-iou", "--pred-dir", str(pred), "--gt-dir", str(dataset / "gt"), "--out", str(table)]) == 0
    assert len(table.read_text().splitlines()) == 10
    fig = tmp_path / "f1.png"
    assert run(["plot", "--kind", "f1_vs_iou", "--table", str(table), "--out", str(fig)]) == 0
    assert fig.stat().st_size > 0


def test_render_targets_values(dataset, tmp_path):
    out = tmp_path / "targets"
    assert run(["render-targets", "--data-dir", str(dataset), "--out-dir", str(out), "--limit", "1"]) == 0
    (npz,) = out.glob("*_targets.npz")
    with np.load(npz) as z:
        contour = z["contour"]
        assert contour.shape == (32, 32)
        assert set(np.unique(contour)) <= {0.0, np.float32(0.6), np.float32(0.9), 1.0}
        assert z["distances"].shape == (4, 32, 32)
    assert list(out.glob("*_overlay.png"))


def _pipeline(workdir: Path, dataset: Path):
    cfg = {
        "variant": "aux2",
        "backbone": {"stage_channels": [8, 8, 16, 16, 32], "decoder_channels": [16, 16, 16], "input_size": 128},
        "stages": [{"input_size": 128, "steps": 3, "learning_rate": 0.001}],
        "batch_size": 2,
        "seed": 0,
        "checkpoint_every": 0,
        "dataset": {"root": str(dataset), "format": "synthetic"},
    }
    (workdir / "run.yaml").write_text(yaml.safe_dump(cfg))
    synth = {"canvas": 128, "seed": 1, "n": 2}
    (workdir / "synth.yaml").write_text(yaml.safe_dump(synth))
    det = ["--deterministic"]
    assert run(["synth", "--config", str(workdir / "synth.yaml"), "--out-dir", str(workdir / "synth")] + det) == 0
    assert run(["train", "--config", str(workdir / "run.yaml"), "--out-dir", str(workdir / "train")] + det) == 0
    ckpt = workdir / "train" / "checkpoints" / "last.pt"
    assert run(["predict", "--checkpoint", str(ckpt), "--input-dir", str(dataset / "images"),
                "--out-dir", str(workdir / "pred"), "--score-threshold", "0.3"] + det) == 0
    assert run(["sweep-iou", "--pred-dir", str(workdir / "pred"), "--gt-dir", str(dataset / "gt"),
                "--out", str(workdir / "sweep.csv")] + det) == 0
    assert run(["plot", "--kind", "loss_curves", "--log", str(workdir / "train" / "train_log.csv"),
                "--out", str(workdir / "loss.png")] + det) == 0
    assert run(["render-targets", "--data-dir", str(workdir / "synth"), "--out-dir", str(workdir / "targets")] + det) == 0


def test_deterministic_outputs_byte_identical(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    _pipeline(a, dataset)
    _pipeline(b, dataset)
    da, db = digest_tree(a), digest_tree(b)
    assert len(da) > 10
    assert da == db


def test_usage_error_exit_code(capsys):
    assert run(["eval", "--bogus"]) == 2
    assert run([]) == 2


def test_runtime_error_is_categorized(tmp_path, capsys):
    assert run(["eval", "--pred-dir", str(tmp_path / "nope"), "--gt-dir", str(tmp_path / "nope")]) == 1
    assert "error[io]" in capsys.readouterr().err
    bad = tmp_path / "gt"
    bad.mkdir()
    (bad / "gt_1.txt").write_text("garbage line\n")
    assert run(["eval", "--pred-dir", str(tmp_path), "--gt-dir", str(bad)]) == 1
    assert "error[data]" in capsys.readouterr().err
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("variant: cascade9\n")
    assert run(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 1
    assert "error[config]" in capsys.readouterr().err


def test_help_documents_flags(capsys):
    assert run(["predict", "--help"]) == 0
    out = capsys.readouterr().out
    for flag in ("--checkpoint", "--input-dir", "--out-dir", "--overlay", "--deterministic"):
        assert flag in out
