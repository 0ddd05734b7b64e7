"""Static figure emitters: loss curves, F1-vs-IoU curves, target and detection overlays."""
from __future__ import annotations

import io
import zipfile
from dataclasses import dataclass
from pathlib import Path

import cv2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .datasets import write_image  # noqa: E402
from .evaluation import read_table  # noqa: E402
from .targets import TargetMaps  # noqa: E402
from .training import read_training_log  # noqa: E402

PLOT_KINDS = ("loss_curves", "f1_vs_iou", "target_overlay", "detection_overlay")
_PNG_META = {"Software": None}

LOSS_COLUMNS = ("l_total", "l_geo", "l_iou", "l_theta", "l_score", "l_contour")


@dataclass
class PlotSpec:
    kind: str
    inputs: list
    out: str

    def __post_init__(self):
        if self.kind not in PLOT_KINDS:
            raise ValueError(f"unknown plot kind {self.kind!r}")
        missing = [p for p in self.inputs if not Path(p).exists()]
        if missing:
            raise FileNotFoundError(f"plot inputs not found: {missing}")


def _save(fig, out):
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_curves(log_path, out) -> None:
    rows = read_training_log(log_path)
    if not rows:
        raise ValueError(f"{log_path} has no logged steps")
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    for col in LOSS_COLUMNS:
        if col in rows[0]:
            ax.plot(steps, [float(r[col]) for r in rows], label=col, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out)


def plot_f1_vs_iou(table_paths, out, labels=None) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for i, path in enumerate(table_paths):
        rows = read_table(Path(path).read_text(encoding="utf-8"))
        label = labels[i] if labels else Path(path).stem
        ax.plot([r[0] for r in rows], [r[3] for r in rows], marker="o", label=label)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out)


def _heat(values: np.ndarray, size) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float32), 0, 1)
    v = cv2.resize(v, size, interpolation=cv2.INTER_NEAREST)
    colored = cv2.applyColorMap((v * 255).astype(np.uint8), cv2.COLORMAP_JET)
    return cv2.cvtColor(colored, cv2.COLOR_BGR2RGB)


def target_overlay(image: np.ndarray, maps: TargetMaps) -> np.ndarray:
    """Side-by-side RGB panel: image, contour heatmap, score/ignore overlay."""
    H, W = image.shape[:2]
    contour = _heat(maps.contour, (W, H))
    score = cv2.resize(maps.score, (W, H), interpolation=cv2.INTER_NEAREST).astype(bool)
    ignore = cv2.resize(maps.ignore, (W, H), interpolation=cv2.INTER_NEAREST).astype(bool)
    over = image.astype(np.float32).copy()
    over[score] = 0.5 * over[score] + 0.5 * np.array([0, 255, 0])
    over[ignore] = 0.5 * over[ignore] + 0.5 * np.array([255, 0, 0])
    return np.concatenate([image, contour, over.astype(np.uint8)], axis=1)


def draw_detection_overlay(out, image: np.ndarray, dets, contour=None) -> np.ndarray:
    H, W = image.shape[:2]
    canvas = image.copy()
    if contour is not None:
        canvas = (0.55 * canvas + 0.45 * _heat(contour, (W, H))).astype(np.uint8)
    for d in dets:
        pts = np.round(d.box).astype(np.int32)
        cv2.polylines(canvas, [pts], True, (255, 255, 0), 1)
    if out is not None:
        write_image(out, canvas)
    return canvas


def save_arrays(path, arrays: dict) -> None:
    """``np.savez`` equivalent with fixed zip timestamps (byte-reproducible)."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[key]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{key}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def render_targets(sample, maps: TargetMaps, out_dir) -> dict:
    """Write the target arrays (``.npz``) and QA images for one sample."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = sample.name or "sample"
    paths = {
        "arrays": out_dir / f"{name}_targets.npz",
        "contour": out_dir / f"{name}_contour.png",
        "overlay": out_dir / f"{name}_overlay.png",
    }
    save_arrays(paths["arrays"], maps.as_dict())
    write_image(paths["contour"], (maps.contour * 255).round().astype(np.uint8))
    write_image(paths["overlay"], target_overlay(sample.image, maps))
    return paths
