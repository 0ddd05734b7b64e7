"""scikit-learn style wrappers: a target encoder and the trainable detector."""
from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .datasets import AugmentConfig, DatasetSpec
from .evaluation import match_and_score
from .losses import LossWeights
from .model import BackboneConfig, ModelVariant
from .postprocess import DecodeConfig
from .targets import TargetConfig, build_targets
from .training import RunConfig, Stage, predict_image, predict_maps, train
from .validation import check_images, check_samples


class TargetEncoder(TransformerMixin, BaseEstimator):
    """Turn annotated images into dense :class:`~contourdet.targets.TargetMaps`."""

    def __init__(self, shrink_ratio=0.3, min_side=2.0, stride=4):
        self.shrink_ratio = shrink_ratio
        self.min_side = min_side
        self.stride = stride

    def fit(self, X, y=None):
        return self

    def transform(self, X, y=None):
        samples = check_samples(X, y)
        cfg = TargetConfig(self.shrink_ratio, self.min_side, self.stride)
        return [build_targets(s, cfg) for s in samples]


class TextContourDetector(BaseEstimator):
    """Contour-assisted RBOX text detector.

    ``fit(X, y)`` takes images (``N x H x W x 3`` uint8, sides divisible by 32
    unless ``augment`` is set) and per-image annotations; ``predict(X)``
    returns one list of :class:`~contourdet.geometry.Detection` per image.
    """

    def __init__(self, variant="cascade2", stage_channels=(16, 32, 64, 128, 256),
                 decoder_channels=(128, 64, 32), norm="group", input_size=256, steps=1000,
                 learning_rate=1e-3, batch_size=8, seed=0, lambda_cls=0.01, beta_contour=0.1,
                 lambda_iou=1.0, shrink_ratio=0.3, score_threshold=0.8, nms_iou=0.2,
                 merge_mode="standard", augment=False, grad_clip=5.0):
        self.variant = variant
        self.stage_channels = stage_channels
        self.decoder_channels = decoder_channels
        self.norm = norm
        self.input_size = input_size
        self.steps = steps
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed
        self.lambda_cls = lambda_cls
        self.beta_contour = beta_contour
        self.lambda_iou = lambda_iou
        self.shrink_ratio = shrink_ratio
        self.score_threshold = score_threshold
        self.nms_iou = nms_iou
        self.merge_mode = merge_mode
        self.augment = augment
        self.grad_clip = grad_clip

    def _decode_config(self):
        return DecodeConfig(self.score_threshold, self.nms_iou, merge_mode=self.merge_mode)

    def run_config(self) -> RunConfig:
        dataset = None
        if self.augment:
            dataset = DatasetSpec("", format="synthetic", augmentation=AugmentConfig(crop_size=self.input_size))
        return RunConfig(
            variant=ModelVariant(self.variant),
            backbone=BackboneConfig(self.stage_channels, self.decoder_channels, self.input_size, norm=self.norm),
            weights=LossWeights(self.lambda_cls, self.beta_contour, self.lambda_iou),
            stages=[Stage(self.input_size, self.steps, self.learning_rate)],
            batch_size=self.batch_size,
            seed=self.seed,
            dataset=dataset,
            decode=self._decode_config(),
            targets=TargetConfig(shrink_ratio=self.shrink_ratio),
            grad_clip=self.grad_clip,
            checkpoint_every=0,
        )

    def fit(self, X, y=None, callback=None):
        samples = check_samples(X, y)
        run = train(self.run_config(), samples=samples, callback=callback)
        self.model_ = run.model
        self.history_ = run.history
        self.n_steps_ = run.steps
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        decode = self._decode_config()
        return [predict_image(self.model_, img, decode)[0] for img in check_images(X)]

    def predict_maps(self, X):
        """Raw network outputs (numpy) per image."""
        check_is_fitted(self, "model_")
        return [predict_maps(self.model_, img) for img in check_images(X)]

    def score(self, X, y=None, iou_threshold=0.5):
        """F1 at ``iou_threshold`` against the given annotations."""
        samples = check_samples(X, y)
        dets = self.predict([s.image for s in samples])
        return match_and_score(dets, [s.instances for s in samples], iou_threshold).f1
