"""Detection evaluation: greedy IoU matching, P/R/F1, threshold sweeps, capacity study.

Matching protocol (per image, per IoU threshold):

1. Detections are visited in descending score order; equal scores keep input
   order.
2. A detection's candidates are the still-unmatched care ground truths plus
   every don't-care ground truth.  It takes the candidate with the highest IoU
   (ties: lower ground-truth index).
3. If that IoU reaches the threshold: a care ground truth becomes a true
   positive and is consumed; a don't-care one makes the detection ignored
   (neither TP nor FP).  Otherwise the detection is a false positive.

Precision is TP / (TP + FP) and recall TP / (#care ground truths); both are 0
when their denominator is 0.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import quad_iou_matrix

log = logging.getLogger(__name__)

IOU_TOLERANCE = 1e-9
DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(9))


@dataclass
class EvalResult:
    precision: float
    recall: float
    f1: float
    tp: int = 0
    fp: int = 0
    ignored: int = 0
    n_gt: int = 0
    iou_threshold: float = 0.5
    per_threshold: list = field(default_factory=list)

    @property
    def matched(self) -> int:
        return self.tp

    @property
    def unmatched_gt(self) -> int:
        return self.n_gt - self.tp


def f1_score(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _as_gt(g):
    if hasattr(g, "quad"):
        return np.asarray(g.quad, dtype=np.float64), bool(g.dont_care)
    return np.asarray(g, dtype=np.float64).reshape(4, 2), False


def match_image(dets, gts, iou_threshold: float = 0.5) -> tuple[int, int, int, int]:
    """Return ``(tp, fp, ignored, n_care_gt)`` for one image."""
    gt_quads, care = [], []
    for g in gts:
        q, dc = _as_gt(g)
        gt_quads.append(q)
        care.append(not dc)
    care = np.array(care, dtype=bool)
    n_care = int(care.sum())
    if not dets:
        return 0, 0, 0, n_care
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    ious = quad_iou_matrix([dets[i].box for i in order], gt_quads)
    taken = np.zeros(len(gt_quads), dtype=bool)
    tp = fp = ignored = 0
    for row in ious:
        cand = np.where(care & taken, -1.0, row)
        j = int(np.argmax(cand)) if len(cand) else -1
        if j >= 0 and cand[j] >= iou_threshold - IOU_TOLERANCE:
            if care[j]:
                tp += 1
                taken[j] = True
            else:
                ignored += 1
        else:
            fp += 1
    return tp, fp, ignored, n_care


def match_and_score(dets_per_image, gts_per_image, iou_threshold: float = 0.5) -> EvalResult:
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths cover different numbers of images")
    tp = fp = ign = n_gt = 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        a, b, c, d = match_image(list(dets), list(gts), iou_threshold)
        tp, fp, ign, n_gt = tp + a, fp + b, ign + c, n_gt + d
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / n_gt if n_gt else 0.0
    return EvalResult(p, r, f1_score(p, r), tp, fp, ign, n_gt, iou_threshold)


def sweep_iou(dets_per_image, gts_per_image, thresholds=DEFAULT_THRESHOLDS) -> list[tuple]:
    """``(threshold, P, R, F1)`` rows, one matching pass per threshold."""
    thresholds = list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    rows = []
    for t in thresholds:
        res = match_and_score(dets_per_image, gts_per_image, t)
        rows.append((float(t), res.precision, res.recall, res.f1))
    return rows


def evaluate(dets_per_image, gts_per_image, thresholds=DEFAULT_THRESHOLDS, iou_threshold=0.5) -> EvalResult:
    res = match_and_score(dets_per_image, gts_per_image, iou_threshold)
    res.per_threshold = sweep_iou(dets_per_image, gts_per_image, thresholds)
    return res


def format_table(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iou_threshold", "precision", "recall", "f1"])
    for t, p, r, f in rows:
        writer.writerow([f"{t:.2f}", f"{p:.4f}", f"{r:.4f}", f"{f:.4f}"])
    return buf.getvalue()


def read_table(text: str) -> list[tuple]:
    reader = csv.DictReader(io.StringIO(text))
    return [(float(r["iou_threshold"]), float(r["precision"]), float(r["recall"]), float(r["f1"])) for r in reader]


def summary_line(res: EvalResult) -> str:
    return (f"IoU>={res.iou_threshold:.2f}  P={res.precision:.3f} R={res.recall:.3f} F1={res.f1:.3f}"
            f"  (TP={res.tp} FP={res.fp} GT={res.n_gt})")


@dataclass
class CapacityEntry:
    variant: str
    result: EvalResult | None
    steps: int
    final_loss: object = None
    error: str | None = None


def capacity_study(variants, samples, cfg_template, steps: int, eval_every: int = 0,
                   stop_at_f1: float | None = None, iou_threshold: float = 0.5) -> list[CapacityEntry]:
    """Train each variant identically and score it on its own training set.

    ``cfg_template`` is a :class:`~contourdet.training.RunConfig`; its variant
    and stages are overridden.  With ``eval_every`` > 0 and ``stop_at_f1`` set,
    training stops early once the training-set F1 reaches that value.
    """
    from dataclasses import replace

    from .training import Stage, TrainingDiverged, predict_samples, train

    gts = [s.instances for s in samples]
    out = []
    for variant in variants:
        size = samples[0].image.shape[0]
        lr = cfg_template.stages[0].learning_rate if cfg_template.stages else 1e-3
        cfg = replace(cfg_template, variant=variant, stages=[Stage(size, steps, lr)])

        def callback(step, net, cfg=cfg):
            if not eval_every or stop_at_f1 is None or (step + 1) % eval_every:
                return False
            dets = predict_samples(net, samples, cfg.decode)
            return match_and_score(dets, gts, iou_threshold).f1 >= stop_at_f1

        try:
            run = train(cfg, samples=samples, callback=callback)
        except TrainingDiverged as exc:
            log.warning("variant %s diverged: %s", variant, exc)
            out.append(CapacityEntry(str(variant), None, exc.step, None, str(exc)))
            continue
        dets = predict_samples(run.model, samples, cfg.decode)
        res = evaluate(dets, gts, iou_threshold=iou_threshold)
        final = run.history[-1] if run.history else None
        out.append(CapacityEntry(str(getattr(variant, "value", variant)), res, run.steps, final))
    return out
