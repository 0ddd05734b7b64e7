"""Contour-assisted scene text detection at desk scale."""
from .estimator import TargetEncoder, TextContourDetector
from .geometry import Detection, RotatedBox, min_area_rect, quad_iou, shrink_quad
from .model import BackboneConfig, ModelVariant, build_model, count_shared_parameters
from .targets import AnnotatedImage, TargetMaps, TextInstance, build_targets

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage",
    "BackboneConfig",
    "Detection",
    "ModelVariant",
    "RotatedBox",
    "TargetEncoder",
    "TargetMaps",
    "TextContourDetector",
    "TextInstance",
    "build_model",
    "build_targets",
    "count_shared_parameters",
    "min_area_rect",
    "quad_iou",
    "shrink_quad",
]
