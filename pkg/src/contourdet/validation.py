"""Input validation helpers shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np

from .geometry import as_quad
from .targets import AnnotatedImage, TextInstance


def check_image(image, multiple_of: int | None = None) -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.number) or arr.min() < 0 or arr.max() > 255:
            raise ValueError("image intensities must lie in 0..255")
        arr = arr.astype(np.uint8)
    if multiple_of and (arr.shape[0] % multiple_of or arr.shape[1] % multiple_of):
        raise ValueError(f"image size {arr.shape[:2]} must be a multiple of {multiple_of}")
    return arr


def check_images(X, multiple_of: int | None = None) -> list[np.ndarray]:
    """Accept an ``N x H x W x 3`` array or a sequence of images (or AnnotatedImages)."""
    if isinstance(X, np.ndarray) and X.ndim == 4:
        items = list(X)
    elif isinstance(X, (list, tuple)):
        items = [x.image if isinstance(x, AnnotatedImage) else x for x in X]
    else:
        raise ValueError("X must be an N x H x W x 3 array or a list of images")
    if not items:
        raise ValueError("X is empty")
    return [check_image(x, multiple_of) for x in items]


def check_instance(obj) -> TextInstance:
    if isinstance(obj, TextInstance):
        return TextInstance(as_quad(obj.quad, check=False), obj.text, obj.dont_care)
    if isinstance(obj, tuple) and len(obj) in (2, 3) and np.asarray(obj[0]).size == 8:
        quad, text = obj[0], obj[1]
        dont_care = bool(obj[2]) if len(obj) == 3 else text == "###"
        return TextInstance(as_quad(quad, check=False), str(text), dont_care)
    arr = np.asarray(obj, dtype=np.float64)
    if arr.size != 8:
        raise ValueError(f"cannot interpret {obj!r} as a quadrilateral annotation")
    return TextInstance(as_quad(arr, check=False))


def check_annotations(y, n_images: int) -> list[list[TextInstance]]:
    """Normalize per-image annotations (instances, ``(quad, text[, dont_care])`` or bare quads)."""
    if y is None:
        raise ValueError("annotations are required")
    if len(y) != n_images:
        raise ValueError(f"got annotations for {len(y)} images but {n_images} images")
    return [[check_instance(o) for o in per_image] for per_image in y]


def check_samples(X, y=None) -> list[AnnotatedImage]:
    if y is None and isinstance(X, (list, tuple)) and X and all(isinstance(x, AnnotatedImage) for x in X):
        return [AnnotatedImage(check_image(s.image), check_annotations([s.instances], 1)[0], s.name) for s in X]
    images = check_images(X)
    ann = check_annotations(y, len(images))
    return [AnnotatedImage(img, inst, f"sample_{i:05d}") for i, (img, inst) in enumerate(zip(images, ann))]
