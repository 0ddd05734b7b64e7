"""Dense-map decoding, suppression, and prediction files."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Detection, is_simple_quad, order_quad, quad_iou_matrix
from .targets import OUTPUT_STRIDE

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    score_threshold: float = 0.8
    nms_iou: float = 0.2
    max_detections: int = 1000
    merge_mode: str = "standard"

    def __post_init__(self):
        if not 0 <= self.score_threshold <= 1 or not 0 <= self.nms_iou <= 1:
            raise ValueError("thresholds must lie in [0, 1]")
        if self.merge_mode not in ("standard", "locality_aware"):
            raise ValueError(f"unknown merge mode {self.merge_mode!r}")
        if self.max_detections < 0:
            raise ValueError("max_detections must be non-negative")


def decode_rbox_arrays(score, distances, angle, score_threshold=0.8, stride=OUTPUT_STRIDE):
    """Vectorized RBOX reconstruction.

    Returns ``(quads K x 4 x 2, scores K, n_skipped)`` in row-major pixel order.
    Quads are in input-image pixels; pixels with non-finite or empty geometry
    are skipped.
    """
    score = np.asarray(score, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    rows, cols = np.nonzero(score >= score_threshold)
    d = distances[:, rows, cols].T * stride  # K x 4
    th = angle[rows, cols]
    s = score[rows, cols]
    ok = np.isfinite(d).all(axis=1) & np.isfinite(th) & np.isfinite(s)
    ok &= ((d[:, 0] + d[:, 2]) > 0) & ((d[:, 1] + d[:, 3]) > 0)
    skipped = int((~ok).sum())
    d, th, s = d[ok], th[ok], s[ok]
    px = (cols[ok] + 0.5) * stride
    py = (rows[ok] + 0.5) * stride
    c, sn = np.cos(th), np.sin(th)
    u = np.stack([c, sn], axis=1)
    v = np.stack([-sn, c], axis=1)
    top, right, bottom, left = d.T
    p = np.stack([px, py], axis=1)
    corners = np.stack([
        p - u * left[:, None] - v * top[:, None],
        p + u * right[:, None] - v * top[:, None],
        p + u * right[:, None] + v * bottom[:, None],
        p - u * left[:, None] + v * bottom[:, None],
    ], axis=1)
    return corners, np.clip(s, 0.0, 1.0), skipped


def decode_rbox(score, distances, angle, cfg: DecodeConfig | None = None) -> list[Detection]:
    cfg = cfg or DecodeConfig()
    quads, scores, skipped = decode_rbox_arrays(score, distances, angle, cfg.score_threshold)
    if skipped:
        log.warning("decode skipped %d pixels with invalid geometry", skipped)
    return [Detection(order_quad(q), float(s)) for q, s in zip(quads, scores)]


def _standard_nms(quads, scores, thresh):
    order = np.argsort(-scores, kind="stable")
    quads, scores = quads[order], scores[order]
    alive = np.ones(len(quads), dtype=bool)
    keep = []
    for i in range(len(quads)):
        if not alive[i]:
            continue
        keep.append(i)
        rest = np.nonzero(alive[i + 1:])[0] + i + 1
        if len(rest):
            ious = quad_iou_matrix(quads[i:i + 1], quads[rest])[0]
            alive[rest[ious > thresh]] = False
    return [order[k] for k in keep]


def _locality_merge(quads, scores, thresh):
    """Merge consecutive overlapping quads (input order) by score-weighted averaging.

    A group whose scores are all zero falls back to the plain vertex mean.
    """
    groups = []  # [weighted vertex sum, plain vertex sum, score sum, count]
    for q, s in zip(quads, scores):
        if groups:
            g = groups[-1]
            if quad_iou_matrix([_group_quad(g)], [q])[0, 0] > thresh:
                g[0] += s * q
                g[1] += q
                g[2] += s
                g[3] += 1
                continue
        groups.append([s * q, q.copy(), s, 1])
    merged_q = [_group_quad(g) for g in groups]
    merged_s = [g[2] / g[3] for g in groups]
    return np.array(merged_q).reshape(-1, 4, 2), np.array(merged_s)


def _group_quad(g):
    return g[0] / g[2] if g[2] > 0 else g[1] / g[3]


def nms(dets: list[Detection], cfg: DecodeConfig | None = None) -> list[Detection]:
    """Greedy suppression (optionally preceded by locality-aware merging).

    Ties in score keep input order.  Output is sorted by descending score.
    """
    cfg = cfg or DecodeConfig()
    if not dets:
        return []
    quads = np.stack([d.box for d in dets])
    scores = np.array([d.score for d in dets], dtype=np.float64)
    if cfg.merge_mode == "locality_aware":
        quads, scores = _locality_merge(quads, scores, cfg.nms_iou)
    keep = _standard_nms(quads, scores, cfg.nms_iou)[: cfg.max_detections]
    return [Detection(order_quad(quads[k]), float(scores[k])) for k in keep]


def detect(score, distances, angle, cfg: DecodeConfig | None = None) -> list[Detection]:
    """Decode one image's maps and suppress duplicates; drops invalid quads."""
    cfg = cfg or DecodeConfig()
    dets = nms(decode_rbox(score, distances, angle, cfg), cfg)
    return [d for d in dets if is_simple_quad(d.box)]


def format_detection(det: Detection) -> str:
    coords = ",".join(f"{v:.2f}" for v in det.box.reshape(-1))
    return f"{coords},{det.score:.4f}"


def write_predictions(path, dets: list[Detection]) -> None:
    Path(path).write_text("".join(format_detection(d) + "\n" for d in dets), encoding="utf-8")


def read_predictions(path) -> list[Detection]:
    dets = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8-sig").splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) not in (8, 9):
            raise ValueError(f"{path}:{lineno}: expected 8 coordinates and an optional score")
        vals = [float(x) for x in parts]
        score = vals[8] if len(vals) == 9 else 1.0
        dets.append(Detection(order_quad(np.array(vals[:8]).reshape(4, 2)), min(max(score, 0.0), 1.0)))
    return dets
