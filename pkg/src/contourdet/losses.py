"""Training objectives for the score, geometry and contour outputs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

EPSILON = 1e-5


class NonFiniteLossError(FloatingPointError):
    """A loss component is NaN or infinite."""


@dataclass
class LossWeights:
    lambda_cls: float = 0.01
    beta_contour: float = 0.1
    lambda_iou: float = 1.0
    epsilon: float = EPSILON

    def __post_init__(self):
        for name in ("lambda_cls", "beta_contour", "lambda_iou", "epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossReport:
    l_score: float
    l_iou: float
    l_theta: float
    l_geo: float
    l_contour: float | None
    l_total: float
    flags: list[str] = field(default_factory=list)

    def recompute_total(self, weights: LossWeights) -> float:
        total = self.l_geo + weights.lambda_cls * self.l_score
        if self.l_contour is not None:
            total += weights.beta_contour * self.l_contour
        return total

    def is_consistent(self, weights: LossWeights, tol: float = 1e-6) -> bool:
        geo_ok = abs(self.l_geo - (weights.lambda_iou * self.l_iou + self.l_theta)) <= tol
        return geo_ok and abs(self.l_total - self.recompute_total(weights)) <= tol


def _masked(x, mask):
    return x if mask is None else x * mask


def dice_loss(pred, gt, mask=None, eps: float = EPSILON):
    """``1 - 2 sum(pred*gt) / (sum(pred) + sum(gt) + eps)`` over unmasked pixels.

    Returns 0 when the mask removes every pixel.
    """
    if mask is not None and not bool(mask.any()):
        return pred.sum() * 0.0
    p, g = _masked(pred, mask), _masked(gt, mask)
    inter = (p * g).sum()
    return 1.0 - 2.0 * inter / (p.sum() + g.sum() + eps)


def iou_box_loss(pred_d, gt_d, positive=None, eps: float = EPSILON):
    """UnitBox-style ``-log IoU`` of the in-frame rectangles around each pixel.

    ``pred_d``/``gt_d`` have the four distances (top, right, bottom, left) on
    dim 1 (``N x 4 x H x W``) or on the last dim of a ``K x 4`` array.
    Averaged over positive pixels; 0 when there are none.
    """
    dim = 1 if pred_d.dim() == 4 else -1
    pt, pr, pb, pl = pred_d.unbind(dim)
    gt_, gr, gb, gl = gt_d.unbind(dim)
    area_p = (pt + pb) * (pl + pr)
    area_g = (gt_ + gb) * (gl + gr)
    ih = torch.minimum(pt, gt_) + torch.minimum(pb, gb)
    iw = torch.minimum(pl, gl) + torch.minimum(pr, gr)
    inter = ih * iw
    union = area_p + area_g - inter
    per_pixel = -torch.log((inter + eps) / (union + eps))
    return _positive_mean(per_pixel, positive)


def angle_loss(pred_theta, gt_theta, positive=None):
    """Mean of ``1 - cos(pred - gt)`` over positive pixels."""
    return _positive_mean(1.0 - torch.cos(pred_theta - gt_theta), positive)


def contour_loss(pred, gt, mask=None):
    """Mean squared error over unmasked pixels."""
    sq = (pred - gt) ** 2
    if mask is None:
        return sq.mean()
    denom = mask.sum()
    if float(denom) == 0:
        return sq.sum() * 0.0
    return (sq * mask).sum() / denom


def _positive_mean(values, positive):
    if positive is None:
        return values.mean()
    positive = positive.to(values.dtype)
    denom = positive.sum()
    if float(denom) == 0:
        return values.sum() * 0.0
    return (values * positive).sum() / denom


def total_loss(components: dict, weights: LossWeights | None = None,
               with_contour: bool = True, flags=None) -> LossReport:
    """Combine scalar components into a :class:`LossReport`.

    ``components`` needs ``l_score``, ``l_iou``, ``l_theta`` and, when
    ``with_contour`` is set, ``l_contour``.
    """
    weights = weights or LossWeights()
    names = ["l_score", "l_iou", "l_theta"] + (["l_contour"] if with_contour else [])
    vals = {}
    for name in names:
        v = float(components[name])
        if not math.isfinite(v):
            raise NonFiniteLossError(f"{name} is not finite ({v})")
        vals[name] = v
    l_geo = weights.lambda_iou * vals["l_iou"] + vals["l_theta"]
    l_total = l_geo + weights.lambda_cls * vals["l_score"]
    if with_contour:
        l_total += weights.beta_contour * vals["l_contour"]
    return LossReport(
        l_score=vals["l_score"], l_iou=vals["l_iou"], l_theta=vals["l_theta"], l_geo=l_geo,
        l_contour=vals.get("l_contour"), l_total=l_total, flags=list(flags or []),
    )


def joint_loss(outputs, targets: dict, weights: LossWeights | None = None):
    """Differentiable joint objective plus its report.

    ``outputs`` is a :class:`~contourdet.model.NetworkOutputs`; ``targets`` holds
    batched tensors ``score``, ``distances``, ``angle``, ``contour``, ``ignore``
    with a channel dim of 1 on the single-channel maps.
    """
    weights = weights or LossWeights()
    keep = 1.0 - targets["ignore"]
    gt_score = targets["score"]
    positive = gt_score * keep
    flags = []
    if float(keep.sum()) == 0:
        flags.append("all_ignored")
    if float(positive.sum()) == 0:
        flags.append("no_positive_pixels")

    l_score = dice_loss(outputs.score, gt_score, keep, weights.epsilon)
    l_iou = iou_box_loss(outputs.distances, targets["distances"], positive[:, 0], weights.epsilon)
    l_theta = angle_loss(outputs.angle[:, 0], targets["angle"][:, 0], positive[:, 0])
    l_geo = weights.lambda_iou * l_iou + l_theta
    total = l_geo + weights.lambda_cls * l_score
    comps = {"l_score": l_score, "l_iou": l_iou, "l_theta": l_theta}
    with_contour = outputs.contour is not None
    if with_contour:
        l_contour = contour_loss(outputs.contour, targets["contour"], keep)
        total = total + weights.beta_contour * l_contour
        comps["l_contour"] = l_contour
    report = total_loss({k: v.item() for k, v in comps.items()}, weights, with_contour, flags)
    return total, report
