"""Geometric primitives for quadrilateral word boxes.

Conventions used throughout the package:

* A quad is a ``(4, 2)`` float array of ``(x, y)`` image coordinates (y points
  down), ordered clockwise on screen starting from the top-left-most vertex.
  Under this ordering the shoelace signed area is positive.
* A rotated box stores its orientation ``theta`` as the direction of its width
  axis ``(cos theta, sin theta)`` in raw ``(x, y)`` coordinates.  The width is
  the longer side and ``theta`` is wrapped into ``[-pi/4, 3*pi/4)``; squares use
  ``[-pi/4, pi/4)``.
* Pixel ``(row, col)`` has its center at ``(col + 0.5, row + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import shapely

ANGLE_MIN = -np.pi / 4
ANGLE_MAX = 3 * np.pi / 4

_EPS = 1e-9


class GeometryError(ValueError):
    """Raised for geometrically invalid input."""


class DegenerateQuadError(GeometryError):
    """Raised when a quad has (or collapses to) zero area."""


@dataclass(frozen=True)
class RotatedBox:
    cx: float
    cy: float
    width: float
    height: float
    theta: float

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    @property
    def area(self) -> float:
        return self.width * self.height

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit width axis and unit height axis."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        return np.array([c, s]), np.array([-s, c])

    def corners(self) -> np.ndarray:
        u, v = self.axes()
        hw, hh = self.width / 2, self.height / 2
        pts = np.stack([
            self.center - u * hw - v * hh,
            self.center + u * hw - v * hh,
            self.center + u * hw + v * hh,
            self.center - u * hw + v * hh,
        ])
        return order_quad(pts)


@dataclass
class Detection:
    box: np.ndarray
    score: float

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64).reshape(4, 2)
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


def signed_area(poly) -> float:
    """Shoelace area; positive for clockwise-on-screen vertex order."""
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def is_simple_quad(q) -> bool:
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4, 2) or not np.all(np.isfinite(q)):
        return False
    # only the two pairs of opposite edges can properly cross
    if _segments_cross(q[0], q[1], q[2], q[3]) or _segments_cross(q[1], q[2], q[3], q[0]):
        return False
    return abs(signed_area(q)) > _EPS


def order_quad(pts) -> np.ndarray:
    """Reorder a cyclic 4-gon to clockwise order starting at the top-left-most vertex.

    The cyclic vertex sequence is preserved (only reversed and/or rotated), so
    non-convex simple quads stay simple.  "Top-left-most" is the vertex with the
    smallest ``x + y``; ties go to the smaller ``y``.
    """
    q = np.asarray(pts, dtype=np.float64).reshape(4, 2)
    if signed_area(q) < 0:
        q = q[::-1]
    key = np.round(q[:, 0] + q[:, 1], 9)
    start = min(range(4), key=lambda i: (key[i], q[i, 1]))
    return np.roll(q, -start, axis=0).copy()


def as_quad(pts, *, check: bool = True) -> np.ndarray:
    q = order_quad(pts)
    if check and not is_simple_quad(q):
        raise GeometryError(f"not a simple quadrilateral: {q.tolist()}")
    return q


def _polygon(q):
    p = shapely.Polygon(np.asarray(q, dtype=np.float64))
    if not p.is_valid:
        p = shapely.make_valid(p)
    return p


def quad_iou(a, b) -> float:
    """Intersection over union of two quads; degenerate input gives 0."""
    pa, pb = _polygon(a), _polygon(b)
    area_a, area_b = pa.area, pb.area
    if area_a <= _EPS or area_b <= _EPS:
        return 0.0
    inter = pa.intersection(pb).area
    union = area_a + area_b - inter
    if union <= _EPS:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def quad_iou_matrix(quads_a, quads_b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    pa = [_polygon(q) for q in quads_a]
    pb = [_polygon(q) for q in quads_b]
    out = np.zeros((len(pa), len(pb)))
    if not pa or not pb:
        return out
    A = np.array(pa, dtype=object)[:, None]
    B = np.array(pb, dtype=object)[None, :]
    inter = shapely.area(shapely.intersection(A, B))
    area_a = shapely.area(A)
    area_b = shapely.area(B)
    union = area_a + area_b - inter
    valid = (area_a > _EPS) & (area_b > _EPS) & (union > _EPS)
    out[valid] = np.clip(inter[valid] / union[valid], 0.0, 1.0)
    return out


def convex_hull(points) -> np.ndarray:
    """Monotone-chain convex hull, clockwise on screen (positive signed area)."""
    pts = sorted(map(tuple, np.asarray(points, dtype=np.float64)))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= _EPS:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= _EPS:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    if len(hull) >= 3 and signed_area(hull) < 0:
        hull = hull[::-1]
    return hull


def canonical_rbox(cx, cy, width, height, theta) -> RotatedBox:
    """Swap width/height so width is the long side and wrap theta into range."""
    if height > width * (1 + 1e-12):
        width, height = height, width
        theta = theta + np.pi / 2
    theta = (theta - ANGLE_MIN) % np.pi + ANGLE_MIN
    if theta >= ANGLE_MAX:
        theta -= np.pi
    if abs(width - height) <= 1e-9 * max(width, 1.0) and theta >= np.pi / 4:
        theta -= np.pi / 2
    return RotatedBox(float(cx), float(cy), float(width), float(height), float(theta))


def min_area_rect(q) -> RotatedBox:
    """Minimum-area enclosing rotated rectangle via rotating calipers over the hull."""
    hull = convex_hull(q)
    if len(hull) < 3 or abs(signed_area(hull)) <= _EPS:
        raise DegenerateQuadError(f"collinear vertices: {np.asarray(q).tolist()}")
    candidates = []
    for i in range(len(hull)):
        edge = hull[(i + 1) % len(hull)] - hull[i]
        norm = np.hypot(*edge)
        if norm <= _EPS:
            continue
        u = edge / norm
        v = np.array([-u[1], u[0]])
        a, b = hull @ u, hull @ v
        long_side = max(a.max() - a.min(), b.max() - b.min())
        area = (a.max() - a.min()) * (b.max() - b.min())
        candidates.append((area, long_side, u, v, a.min(), a.max(), b.min(), b.max()))
    # Equal-area optima are common (any triangle of the hull can set the area);
    # preferring the shorter long side keeps the choice independent of pose.
    min_area = min(c[0] for c in candidates)
    tied = [c for c in candidates if c[0] <= min_area * (1 + 1e-9)]
    _, _, u, v, a0, a1, b0, b1 = min(tied, key=lambda c: c[1])
    center = u * (a0 + a1) / 2 + v * (b0 + b1) / 2
    theta = np.arctan2(u[1], u[0])
    return canonical_rbox(center[0], center[1], a1 - a0, b1 - b0, theta)


def shrink_quad(q, ratio: float = 0.3) -> np.ndarray:
    """Move each vertex inward along both incident edges by ``ratio * min(edge lengths)``."""
    if not 0 <= ratio < 0.5:
        raise ValueError(f"shrink ratio must lie in [0, 0.5), got {ratio}")
    q = np.asarray(q, dtype=np.float64).reshape(4, 2)
    if ratio == 0:
        return q.copy()
    nxt = np.roll(q, -1, axis=0) - q
    prv = np.roll(q, 1, axis=0) - q
    len_n = np.linalg.norm(nxt, axis=1)
    len_p = np.linalg.norm(prv, axis=1)
    if np.any(len_n <= _EPS):
        raise DegenerateQuadError("quad has a zero-length edge")
    ref = np.minimum(len_n, len_p)
    out = q + ratio * ref[:, None] * (nxt / len_n[:, None] + prv / len_p[:, None])
    if signed_area(out) * np.sign(signed_area(q)) <= _EPS or not is_simple_quad(out):
        raise DegenerateQuadError("shrinking collapsed the quad")
    return out


def point_edge_distances(p, r: RotatedBox, tol: float = 1e-6) -> tuple[float, float, float, float]:
    """Distances ``(top, right, bottom, left)`` from ``p`` to the edges of ``r``."""
    u, v = r.axes()
    d = np.asarray(p, dtype=np.float64) - r.center
    a, b = float(d @ u), float(d @ v)
    top = r.height / 2 + b
    bottom = r.height / 2 - b
    left = r.width / 2 + a
    right = r.width / 2 - a
    if min(top, right, bottom, left) < -tol:
        raise GeometryError(f"point {tuple(p)} lies outside the rotated box")
    return top, right, bottom, left


def rbox_from_distances(p, distances, theta) -> RotatedBox:
    """Inverse of :func:`point_edge_distances` (no canonicalization)."""
    top, right, bottom, left = (float(x) for x in distances)
    c, s = np.cos(theta), np.sin(theta)
    u, v = np.array([c, s]), np.array([-s, c])
    center = np.asarray(p, dtype=np.float64) + u * (right - left) / 2 + v * (bottom - top) / 2
    return RotatedBox(center[0], center[1], left + right, top + bottom, float(theta))


def rotate_points(pts, angle: float, origin=(0.0, 0.0)) -> np.ndarray:
    """Rotate by ``angle`` using the same sense as ``theta`` (x axis toward y axis)."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    o = np.asarray(origin, dtype=np.float64)
    return (np.asarray(pts, dtype=np.float64) - o) @ rot.T + o


def points_in_polygon(px, py, poly) -> np.ndarray:
    """Even-odd test with points on the boundary counted as inside."""
    poly = np.asarray(poly, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    inside = np.zeros(np.broadcast(px, py).shape, dtype=bool)
    on_edge = np.zeros_like(inside)
    n = len(poly)
    scale = max(1.0, float(np.abs(poly).max()))
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at = (x2 - x1) * (py - y1) / (y2 - y1) + x1
        inside ^= crosses & (px < x_at)
        ex, ey = x2 - x1, y2 - y1
        cross = ex * (py - y1) - ey * (px - x1)
        dot = (px - x1) * ex + (py - y1) * ey
        seg2 = ex * ex + ey * ey
        on_edge |= (np.abs(cross) <= 1e-9 * scale * max(np.sqrt(seg2), 1.0)) & (dot >= -_EPS) & (dot <= seg2 + _EPS)
    return inside | on_edge


def rasterize_polygon(q, h: int, w: int) -> np.ndarray:
    """Binary ``h x w`` mask of pixels whose centers lie inside or on ``q``."""
    if h <= 0 or w <= 0:
        raise ValueError("canvas dimensions must be positive")
    mask = np.zeros((h, w), dtype=np.uint8)
    q = np.asarray(q, dtype=np.float64)
    x0 = max(int(np.floor(q[:, 0].min() - 0.5)), 0)
    x1 = min(int(np.ceil(q[:, 0].max() - 0.5)), w - 1)
    y0 = max(int(np.floor(q[:, 1].min() - 0.5)), 0)
    y1 = min(int(np.ceil(q[:, 1].max() - 0.5)), h - 1)
    if x0 > x1 or y0 > y1:
        return mask
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    mask[y0:y1 + 1, x0:x1 + 1] = points_in_polygon(xs + 0.5, ys + 0.5, q)
    return mask


def _line_pixels(c0, r0, c1, r1) -> np.ndarray:
    n = max(abs(c1 - c0), abs(r1 - r0))
    if n == 0:
        return np.array([[r0, c0]])
    t = np.arange(n + 1) / n
    cols = np.floor(c0 + t * (c1 - c0) + 0.5).astype(np.int64)
    rows = np.floor(r0 + t * (r1 - r0) + 0.5).astype(np.int64)
    return np.stack([rows, cols], axis=1)


def boundary_pixels(q) -> np.ndarray:
    """``(row, col)`` indices of the 8-connected 1-px outline of ``q`` (unclipped).

    Vertices snap to the pixel containing them (``floor``); consecutive
    vertices are joined with a digital straight line.
    """
    q = np.asarray(q, dtype=np.float64)
    cells = np.floor(q).astype(np.int64)
    segs = [
        _line_pixels(cells[i, 0], cells[i, 1], cells[(i + 1) % len(q), 0], cells[(i + 1) % len(q), 1])
        for i in range(len(q))
    ]
    return np.unique(np.concatenate(segs), axis=0)
