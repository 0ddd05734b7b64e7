"""Dense training targets: contour band, shrunk score map, RBOX geometry, ignore mask."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import (
    DegenerateQuadError,
    GeometryError,
    boundary_pixels,
    min_area_rect,
    rasterize_polygon,
    shrink_quad,
    signed_area,
)

# contour band values by Chebyshev distance to the outline: 0, 1, <=3
CONTOUR_ON = np.float32(1.0)
CONTOUR_NEAR = np.float32(0.9)
CONTOUR_BAND = np.float32(0.6)
CONTOUR_VALUES = (np.float32(0.0), CONTOUR_BAND, CONTOUR_NEAR, CONTOUR_ON)
_BAND = 3

OUTPUT_STRIDE = 4


@dataclass
class TextInstance:
    quad: np.ndarray
    text: str = ""
    dont_care: bool = False

    def __post_init__(self):
        self.quad = np.asarray(self.quad, dtype=np.float64).reshape(4, 2)


@dataclass
class AnnotatedImage:
    image: np.ndarray  # H x W x 3 uint8
    instances: list[TextInstance] = field(default_factory=list)
    name: str = ""

    @property
    def quads(self) -> list[np.ndarray]:
        return [inst.quad for inst in self.instances]

    @property
    def dont_care(self) -> list[bool]:
        return [inst.dont_care for inst in self.instances]


@dataclass
class TargetConfig:
    shrink_ratio: float = 0.3
    min_side: float = 2.0  # output-scale pixels
    stride: int = OUTPUT_STRIDE


@dataclass
class TargetMaps:
    contour: np.ndarray    # H x W float32
    score: np.ndarray      # H x W uint8
    distances: np.ndarray  # 4 x H x W float32 (top, right, bottom, left), output-scale px
    angle: np.ndarray      # H x W float32
    ignore: np.ndarray     # H x W uint8

    @property
    def shape(self) -> tuple[int, int]:
        return self.score.shape

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "contour": self.contour,
            "score": self.score,
            "distances": self.distances,
            "angle": self.angle,
            "ignore": self.ignore,
        }


def make_contour_target(quads, h: int, w: int) -> np.ndarray:
    """Smoothed instance-outline target with values in {0, 0.6, 0.9, 1}.

    Overlapping bands from several instances compose by maximum, which equals
    banding the union of all outlines.
    """
    if h <= 0 or w <= 0:
        raise ValueError("canvas dimensions must be positive")
    ph, pw = h + 2 * _BAND, w + 2 * _BAND
    outline = np.zeros((ph, pw), dtype=bool)
    for q in quads:
        px = boundary_pixels(q) + _BAND
        keep = (px[:, 0] >= 0) & (px[:, 0] < ph) & (px[:, 1] >= 0) & (px[:, 1] < pw)
        outline[px[keep, 0], px[keep, 1]] = True
    near = ndimage.binary_dilation(outline, structure=np.ones((3, 3), bool))
    band = ndimage.binary_dilation(outline, structure=np.ones((2 * _BAND + 1,) * 2, bool))
    out = np.zeros((ph, pw), dtype=np.float32)
    out[band] = CONTOUR_BAND
    out[near] = CONTOUR_NEAR
    out[outline] = CONTOUR_ON
    return out[_BAND:_BAND + h, _BAND:_BAND + w].copy()


def _is_trainable(q, shrink_ratio: float, min_side: float) -> bool:
    try:
        rect = min_area_rect(q)
        shrink_quad(q, shrink_ratio)
    except GeometryError:
        return False
    return rect.height >= min_side


def make_score_target(quads, dont_care_flags, h: int, w: int, shrink_ratio: float = 0.3,
                      min_side: float = 2.0) -> tuple[np.ndarray, np.ndarray]:
    if not 0 <= shrink_ratio < 0.5:
        raise ValueError(f"shrink ratio must lie in [0, 0.5), got {shrink_ratio}")
    score = np.zeros((h, w), dtype=np.uint8)
    ignore = np.zeros((h, w), dtype=np.uint8)
    for q, dc in zip(quads, dont_care_flags):
        if dc or not _is_trainable(q, shrink_ratio, min_side):
            ignore |= rasterize_polygon(q, h, w)
        else:
            score |= rasterize_polygon(shrink_quad(q, shrink_ratio), h, w)
    score[ignore.astype(bool)] = 0
    return score, ignore


def make_rbox_target(quads, h: int, w: int, score: np.ndarray,
                     shrink_ratio: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel edge distances and angle of the fitted rectangle.

    A pixel covered by several shrunk quads goes to the smallest-area one.
    """
    distances = np.zeros((4, h, w), dtype=np.float32)
    angle = np.zeros((h, w), dtype=np.float32)
    positive = score.astype(bool)
    if not positive.any():
        return distances, angle

    owners = []
    for q in quads:
        try:
            rect = min_area_rect(q)
            region = rasterize_polygon(shrink_quad(q, shrink_ratio), h, w).astype(bool) & positive
        except GeometryError:
            continue
        if region.any():
            owners.append((abs(signed_area(q)), rect, region))
    owners.sort(key=lambda item: -item[0])

    for _, rect, region in owners:
        rows, cols = np.nonzero(region)
        u, v = rect.axes()
        dx = cols + 0.5 - rect.cx
        dy = rows + 0.5 - rect.cy
        a = dx * u[0] + dy * u[1]
        b = dx * v[0] + dy * v[1]
        distances[0, rows, cols] = rect.height / 2 + b
        distances[1, rows, cols] = rect.width / 2 - a
        distances[2, rows, cols] = rect.height / 2 - b
        distances[3, rows, cols] = rect.width / 2 + a
        angle[rows, cols] = rect.theta
    return distances, angle


def build_targets(sample: AnnotatedImage, config: TargetConfig | None = None) -> TargetMaps:
    config = config or TargetConfig()
    H, W = sample.image.shape[:2]
    s = config.stride
    if H % s or W % s:
        raise ValueError(f"image size {H}x{W} is not divisible by the output stride {s}")
    h, w = H // s, W // s
    quads = [np.asarray(q, dtype=np.float64) / s for q in sample.quads]
    flags = sample.dont_care
    contour = make_contour_target(quads, h, w)
    score, ignore = make_score_target(quads, flags, h, w, config.shrink_ratio, config.min_side)
    distances, angle = make_rbox_target(quads, h, w, score, config.shrink_ratio)
    return TargetMaps(contour=contour, score=score, distances=distances, angle=angle, ignore=ignore)


__all__ = [
    "AnnotatedImage",
    "TargetConfig",
    "TargetMaps",
    "TextInstance",
    "build_targets",
    "make_contour_target",
    "make_rbox_target",
    "make_score_target",
    "DegenerateQuadError",
]
