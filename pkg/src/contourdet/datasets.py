"""ICDAR ground-truth IO, scale/crop augmentation, and a synthetic word generator."""
from __future__ import annotations

import json
import logging
import math
import string
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import shapely

from .geometry import as_quad, is_simple_quad, order_quad, signed_area
from .targets import AnnotatedImage, TextInstance

log = logging.getLogger(__name__)

DONT_CARE = "###"
PAD_VALUE = 128
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class IcdarFormatError(ValueError):
    pass


@dataclass
class AugmentConfig:
    scale_range: tuple = (0.5, 2.0)
    crop_size: int = 512
    min_crop_overlap: float = 0.3
    flip: bool = False

    def __post_init__(self):
        self.scale_range = tuple(float(s) for s in self.scale_range)
        if self.crop_size % 32:
            raise ValueError(f"crop size {self.crop_size} must be divisible by 32")
        if self.flip:
            raise ValueError("horizontal flips are not supported for text")


@dataclass
class DatasetSpec:
    root: str
    split: str = "train"
    format: str = "synthetic"
    augmentation: AugmentConfig | None = None

    def __post_init__(self):
        if self.format not in ("icdar2015", "icdar2013", "synthetic"):
            raise ValueError(f"unknown dataset format {self.format!r}")
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentConfig(**self.augmentation)


@dataclass
class SynthConfig:
    canvas: int = 256
    words_per_image: tuple = (2, 4)
    rotation_range: float = math.pi / 6
    font_scale_range: tuple = (16.0, 32.0)  # glyph height in pixels
    chars_per_word: tuple = (2, 7)
    background: str = "noise"
    seed: int = 0
    allow_overlap: bool = False
    max_retries: int = 60

    def __post_init__(self):
        self.words_per_image = tuple(int(v) for v in self.words_per_image)
        self.font_scale_range = tuple(float(v) for v in self.font_scale_range)
        self.chars_per_word = tuple(int(v) for v in self.chars_per_word)
        if self.background not in ("noise", "gradient", "texture"):
            raise ValueError(f"unknown background {self.background!r}")


# ---------------------------------------------------------------- ICDAR text format

def _parse_numbers(fields):
    try:
        return [float(f) for f in fields]
    except ValueError:
        return None


def parse_icdar_line(line: str, fmt: str = "auto", where: str = "<string>") -> TextInstance | None:
    line = line.strip().lstrip("﻿")
    if not line:
        return None
    fields = [f.strip() for f in line.split(",")] if "," in line else line.split()
    quad = None
    if fmt in ("auto", "icdar2015") and len(fields) >= 8:
        nums = _parse_numbers(fields[:8])
        if nums is not None:
            quad, rest = np.array(nums).reshape(4, 2), fields[8:]
    if quad is None and fmt in ("auto", "icdar2013") and len(fields) >= 4:
        nums = _parse_numbers(fields[:4])
        if nums is not None:
            x0, y0, x1, y1 = nums
            quad, rest = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]), fields[4:]
    if quad is None:
        raise IcdarFormatError(f"{where}: cannot parse annotation {line!r}")
    text = ",".join(rest).strip()
    if len(text) >= 2 and text[0] == text[-1] == '"':
        text = text[1:-1]
    dont_care = text == DONT_CARE
    quad = order_quad(quad)
    if not is_simple_quad(quad):
        log.warning("%s: non-simple quadrilateral marked don't-care", where)
        dont_care = True
    return TextInstance(quad, text, dont_care)


def parse_icdar_gt(source, fmt: str = "auto") -> list[TextInstance]:
    """Parse an ICDAR ground-truth file (path) or its text content."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).is_file()):
        name = str(source)
        text = Path(source).read_text(encoding="utf-8-sig")
    else:
        name, text = "<string>", str(source)
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        inst = parse_icdar_line(line, fmt, f"{name}:{lineno}")
        if inst is not None:
            out.append(inst)
    return out


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def format_icdar_gt(instances) -> str:
    lines = []
    for inst in instances:
        coords = ",".join(_fmt(v) for v in np.asarray(inst.quad).reshape(-1))
        lines.append(f"{coords},{DONT_CARE if inst.dont_care else inst.text}\n")
    return "".join(lines)


def write_icdar_gt(path, instances) -> None:
    Path(path).write_text(format_icdar_gt(instances), encoding="utf-8")


# ---------------------------------------------------------------- images

def read_image(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def write_image(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), image):
        raise OSError(f"cannot write image {path}")


# ---------------------------------------------------------------- augmentation

def _visible_quad(q, size):
    """Fraction of ``q`` inside the ``size`` square window, the clamped quad, and
    whether the clamped quad is usable for training.

    Vertices are clamped to the window so the result never leaves the crop.  If
    clamping folds the quad, the visible part's axis-aligned box stands in.
    """
    poly = shapely.Polygon(q)
    if not poly.is_valid:
        poly = shapely.make_valid(poly)
    area = poly.area
    if area <= 0:
        return 0.0, q, False
    vis = poly.intersection(shapely.box(0, 0, size, size))
    frac = vis.area / area
    if frac >= 1 - 1e-9:
        return 1.0, q, True
    if vis.area <= 0:
        return 0.0, q, False
    clamped = np.clip(q, 0, size)
    if is_simple_quad(clamped) and abs(signed_area(clamped)) > 1e-6:
        return frac, clamped, True
    x0, y0, x1, y1 = vis.bounds
    return frac, np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]), False


def augment(sample: AnnotatedImage, cfg: AugmentConfig, rng: np.random.Generator) -> AnnotatedImage:
    """Random uniform rescale then a ``crop_size`` square crop (gray padded)."""
    image = sample.image
    H, W = image.shape[:2]
    lo, hi = cfg.scale_range
    s = float(rng.uniform(lo, hi)) if hi > lo else lo
    nW, nH = max(1, int(round(W * s))), max(1, int(round(H * s)))
    if (nW, nH) != (W, H):
        image = cv2.resize(image, (nW, nH), interpolation=cv2.INTER_LINEAR)
    sx, sy = nW / W, nH / H
    C = cfg.crop_size
    # crop origin in scaled-image coords; negative means the image is padded
    ox = int(rng.integers(0, nW - C + 1)) if nW >= C else -int(rng.integers(0, C - nW + 1))
    oy = int(rng.integers(0, nH - C + 1)) if nH >= C else -int(rng.integers(0, C - nH + 1))
    out = np.full((C, C, 3), PAD_VALUE, dtype=np.uint8)
    src_x0, src_y0 = max(ox, 0), max(oy, 0)
    src_x1, src_y1 = min(ox + C, nW), min(oy + C, nH)
    out[src_y0 - oy:src_y1 - oy, src_x0 - ox:src_x1 - ox] = image[src_y0:src_y1, src_x0:src_x1]

    instances = []
    for inst in sample.instances:
        q = inst.quad * np.array([sx, sy]) - np.array([ox, oy])
        frac, visible, usable = _visible_quad(q, C)
        if frac <= 0:
            continue
        dont_care = inst.dont_care or not usable or frac < cfg.min_crop_overlap
        instances.append(TextInstance(order_quad(visible), inst.text, dont_care))
    return AnnotatedImage(out, instances, sample.name)


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent deterministic substream for ``(seed, *keys)``."""
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


# ---------------------------------------------------------------- synthetic data

def _background(cfg: SynthConfig, rng) -> np.ndarray:
    C = cfg.canvas
    base = rng.uniform(90, 170, size=3)
    if cfg.background == "noise":
        img = base + rng.normal(0, 12, size=(C, C, 3))
    elif cfg.background == "gradient":
        t = np.linspace(-1, 1, C)
        ang = rng.uniform(0, 2 * np.pi)
        ramp = np.cos(ang) * t[None, :] + np.sin(ang) * t[:, None]
        img = base + 35 * ramp[..., None] + rng.normal(0, 4, size=(C, C, 3))
    else:
        small = rng.normal(0, 25, size=(C // 16 + 1, C // 16 + 1, 3)).astype(np.float32)
        img = base + cv2.resize(small, (C, C), interpolation=cv2.INTER_CUBIC)
    return np.clip(img, 0, 255).astype(np.uint8)


def _glyph_strokes(rng, x0, cw, h):
    """Stroke rectangles (local frame) for one block glyph spanning full height."""
    t = max(2.0, 0.22 * cw)
    strokes = [(x0, 0.0, x0 + t, h)]  # left stem
    kind = int(rng.integers(0, 4))
    if kind in (0, 1):
        strokes.append((x0 + cw - t, 0.0, x0 + cw, h))
    if kind in (0, 2):
        strokes.append((x0, 0.0, x0 + cw, t))
    if kind in (1, 2, 3):
        strokes.append((x0, h - t, x0 + cw, h))
    if kind == 3:
        y = float(rng.uniform(0.35, 0.55)) * h
        strokes.append((x0, y, x0 + cw * 0.8, y + t))
    return strokes


def _make_word(cfg, rng):
    h = float(rng.uniform(*cfg.font_scale_range))
    n = int(rng.integers(cfg.chars_per_word[0], cfg.chars_per_word[1] + 1))
    cw, gap = 0.6 * h, 0.18 * h
    strokes = []
    for i in range(n):
        strokes.extend(_glyph_strokes(rng, i * (cw + gap), cw, h))
    width = n * cw + (n - 1) * gap
    text = "".join(rng.choice(list(string.ascii_uppercase), size=n))
    return width, h, strokes, text


def generate_synthetic(cfg: SynthConfig, n: int) -> list[AnnotatedImage]:
    """``n`` images of high-contrast block-glyph words with exact quads."""
    return [generate_synthetic_image(cfg, i) for i in range(n)]


def generate_synthetic_image(cfg: SynthConfig, index: int) -> AnnotatedImage:
    rng = sample_rng(cfg.seed, index)
    C = cfg.canvas
    image = _background(cfg, rng)
    n_words = int(rng.integers(cfg.words_per_image[0], cfg.words_per_image[1] + 1))
    placed, instances = [], []
    for _ in range(n_words):
        width, h, strokes, text = _make_word(cfg, rng)
        for _attempt in range(cfg.max_retries):
            theta = float(rng.uniform(-cfg.rotation_range, cfg.rotation_range)) if cfg.rotation_range > 0 else 0.0
            c, s = math.cos(theta), math.sin(theta)
            rot = np.array([[c, -s], [s, c]])
            local = np.array([[0, 0], [width, 0], [width, h], [0, h]]) - [width / 2, h / 2]
            extent = np.abs(local @ rot.T).max(axis=0)
            margin = 2.0
            if np.any(2 * (extent + margin) >= C):
                break
            center = rng.uniform(extent + margin, C - extent - margin)
            quad = local @ rot.T + center
            poly = shapely.Polygon(quad)
            if not cfg.allow_overlap and any(poly.distance(p) < 0.5 * h for p in placed):
                continue
            placed.append(poly)
            bg = image[int(center[1]), int(center[0])].astype(int).mean()
            color = int(rng.integers(0, 40)) if bg > 127 else int(rng.integers(215, 256))
            for x0, y0, x1, y1 in strokes:
                rect = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]]) - [width / 2, h / 2]
                # cv2 puts pixel centers on integer coordinates; ground truth uses +0.5
                pts = rect @ rot.T + center - 0.5
                cv2.fillPoly(image, [np.round(pts * 16).astype(np.int32)], (color,) * 3, cv2.LINE_8, shift=4)
            instances.append(TextInstance(as_quad(quad), text, False))
            break
    return AnnotatedImage(image, instances, f"synth_{cfg.seed}_{index:05d}")


# ---------------------------------------------------------------- persistence

def save_dataset(samples, root) -> Path:
    """Write ``images/``, ``gt/`` (ICDAR lines) and ``manifest.json`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    items = []
    for s in samples:
        img_rel, gt_rel = f"images/{s.name}.png", f"gt/{s.name}.txt"
        write_image(root / img_rel, s.image)
        write_icdar_gt(root / gt_rel, s.instances)
        items.append({"image": img_rel, "gt": gt_rel})
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"items": items}, indent=2) + "\n", encoding="utf-8")
    return manifest


def _find_gt(gt_dir: Path, stem: str) -> Path | None:
    for cand in (f"{stem}.txt", f"gt_{stem}.txt"):
        if (gt_dir / cand).is_file():
            return gt_dir / cand
    return None


def dataset_pairs(spec: DatasetSpec) -> list[tuple[Path, Path]]:
    root = Path(spec.root)
    if (root / spec.split).is_dir():
        root = root / spec.split
    manifest = root / "manifest.json"
    if manifest.is_file():
        items = json.loads(manifest.read_text(encoding="utf-8"))["items"]
        pairs = [(root / it["image"], root / it["gt"]) for it in items]
    else:
        pairs = []
        img_dir = root / "images" if (root / "images").is_dir() else root
        gt_dir = root / "gt" if (root / "gt").is_dir() else root
        for img in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
            gt = _find_gt(gt_dir, img.stem)
            if gt is None:
                raise FileNotFoundError(f"no ground truth for {img}")
            pairs.append((img, gt))
    for img, gt in pairs:
        if not img.is_file() or not gt.is_file():
            raise FileNotFoundError(f"missing dataset file {img if not img.is_file() else gt}")
    return pairs


def load_dataset(spec: DatasetSpec) -> list[AnnotatedImage]:
    fmt = {"icdar2013": "icdar2013", "icdar2015": "icdar2015"}.get(spec.format, "auto")
    return [
        AnnotatedImage(read_image(img), parse_icdar_gt(gt, fmt), img.stem)
        for img, gt in dataset_pairs(spec)
    ]
