"""Encoder-decoder detector and the five contour/detection wirings.

Variants:

``baseline``   encoder + decoder + 6-channel RBOX head.
``aux1``       shared encoder; twin decoders, one for contour, one for detection.
``aux2``       shared encoder + decoder; the head gains one contour channel.
``cascade1``   separate contour network; its map is resized to the input size and
               stacked onto the image as a 4th channel for a separate detector.
``cascade2``   shared encoder + decoder predict contour; contour is concatenated
               to the last decoder feature, then three 3x3 depth-32 convs feed
               the RBOX head.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .geometry import ANGLE_MIN

IMAGE_MEAN = (0.485, 0.456, 0.406)
MERGE_DEPTH = 32
MERGE_LAYERS = 3

log = logging.getLogger(__name__)


class ModelVariant(str, enum.Enum):
    BASELINE = "baseline"
    AUX1 = "aux1"
    AUX2 = "aux2"
    CASCADE1 = "cascade1"
    CASCADE2 = "cascade2"

    @property
    def has_contour(self) -> bool:
        return self is not ModelVariant.BASELINE


class ConfigError(ValueError):
    pass


class NonFiniteOutputError(FloatingPointError):
    pass


@dataclass
class BackboneConfig:
    stage_channels: tuple = (16, 32, 64, 128, 256)
    decoder_channels: tuple = (128, 64, 32)
    input_size: int = 256
    pretrained_id: str | None = None
    norm: str = "group"

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        if len(self.stage_channels) != 5:
            raise ConfigError("the encoder has exactly 5 stride-2 stages")
        if len(self.decoder_channels) != 3:
            raise ConfigError("the decoder merges 3 skip links (strides 16, 8, 4)")
        check_input_size(self.input_size)
        if self.norm not in ("group", "batch", "none"):
            raise ConfigError(f"unknown norm {self.norm!r}")

    @property
    def geometry_scale(self) -> float:
        """Upper bound of predicted distances, in output-map pixels."""
        return self.input_size / 4


def check_input_size(size: int) -> None:
    if size <= 0 or size % 32:
        raise ConfigError(f"input size {size} must be a positive multiple of 32")


@dataclass
class NetworkOutputs:
    score: torch.Tensor       # N x 1 x h x w
    distances: torch.Tensor   # N x 4 x h x w, output-map pixels
    angle: torch.Tensor       # N x 1 x h x w, radians
    contour: torch.Tensor | None = None

    def numpy(self) -> dict:
        out = {k: getattr(self, k).detach().cpu().numpy() for k in ("score", "distances", "angle")}
        out["contour"] = None if self.contour is None else self.contour.detach().cpu().numpy()
        return out


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        return nn.GroupNorm(min(8, channels), channels)
    return nn.Identity()


def conv_block(cin, cout, k=3, stride=1, norm="group") -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=norm == "none"),
        _norm(norm, cout),
        nn.ReLU(inplace=True),
    )


class Encoder(nn.Module):
    def __init__(self, in_channels: int, channels, norm="group"):
        super().__init__()
        stages, cin = [], in_channels
        for c in channels:
            stages.append(nn.Sequential(conv_block(cin, c, 3, 2, norm), conv_block(c, c, 3, 1, norm)))
            cin = c
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Upsample-and-merge with skip links from strides 16, 8 and 4."""

    def __init__(self, stage_channels, decoder_channels, norm="group"):
        super().__init__()
        self.merges = nn.ModuleList()
        cin = stage_channels[4]
        for skip, cout in zip((stage_channels[3], stage_channels[2], stage_channels[1]), decoder_channels):
            self.merges.append(nn.Sequential(conv_block(cin + skip, cout, 1, 1, norm), conv_block(cout, cout, 3, 1, norm)))
            cin = cout
        self.out_channels = cin

    def forward(self, feats):
        x = feats[4]
        for merge, skip in zip(self.merges, (feats[3], feats[2], feats[1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = merge(torch.cat([x, skip], dim=1))
        return x


class DetectionHead(nn.Module):
    def __init__(self, in_channels: int, geometry_scale: float):
        super().__init__()
        self.score = nn.Conv2d(in_channels, 1, 1)
        self.distances = nn.Conv2d(in_channels, 4, 1)
        self.angle = nn.Conv2d(in_channels, 1, 1)
        self.geometry_scale = geometry_scale

    def forward(self, x):
        score = torch.sigmoid(self.score(x))
        distances = torch.sigmoid(self.distances(x)) * self.geometry_scale
        angle = torch.sigmoid(self.angle(x)) * math.pi + ANGLE_MIN
        return score, distances, angle


class ContourHead(nn.Module):
    def __init__(self, in_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, 1, 1)

    def forward(self, x):
        return torch.sigmoid(self.conv(x))


# which subsystems serve each task, per variant
_TASK_SUBSYSTEMS = {
    ModelVariant.BASELINE: ((), ("encoder", "decoder", "detection_head")),
    ModelVariant.AUX1: (("encoder", "contour_decoder", "contour_head"), ("encoder", "decoder", "detection_head")),
    ModelVariant.AUX2: (("encoder", "decoder", "contour_head"), ("encoder", "decoder", "detection_head")),
    ModelVariant.CASCADE1: (("contour_encoder", "contour_decoder", "contour_head"), ("encoder", "decoder", "detection_head")),
    ModelVariant.CASCADE2: (("encoder", "decoder", "contour_head"), ("encoder", "decoder", "merge", "detection_head")),
}


class TextContourNet(nn.Module):
    def __init__(self, variant, backbone: BackboneConfig | None = None, stop_contour_gradient: bool = False):
        super().__init__()
        self.variant = ModelVariant(variant)
        self.backbone = backbone or BackboneConfig()
        self.stop_contour_gradient = stop_contour_gradient
        self.check_finite = True
        bb, v = self.backbone, self.variant
        det_in = 4 if v is ModelVariant.CASCADE1 else 3

        self.encoder = Encoder(det_in, bb.stage_channels, bb.norm)
        self.decoder = Decoder(bb.stage_channels, bb.decoder_channels, bb.norm)
        feat = self.decoder.out_channels
        if v is ModelVariant.AUX1:
            self.contour_decoder = Decoder(bb.stage_channels, bb.decoder_channels, bb.norm)
        if v is ModelVariant.CASCADE1:
            self.contour_encoder = Encoder(3, bb.stage_channels, bb.norm)
            self.contour_decoder = Decoder(bb.stage_channels, bb.decoder_channels, bb.norm)
        if v.has_contour:
            self.contour_head = ContourHead(feat)
        if v is ModelVariant.CASCADE2:
            layers, cin = [], feat + 1
            for _ in range(MERGE_LAYERS):
                layers.append(conv_block(cin, MERGE_DEPTH, 3, 1, bb.norm))
                cin = MERGE_DEPTH
            self.merge = nn.Sequential(*layers)
            feat = MERGE_DEPTH
        self.detection_head = DetectionHead(feat, bb.geometry_scale)

    def _chk(self, name, x):
        if self.check_finite and not bool(torch.isfinite(x).all()):
            raise NonFiniteOutputError(f"non-finite values produced by {name}")
        return x

    def _contour_for_merge(self, contour):
        return contour.detach() if self.stop_contour_gradient else contour

    def forward(self, x) -> NetworkOutputs:
        if x.shape[-1] % 32 or x.shape[-2] % 32:
            raise ConfigError(f"input spatial size {tuple(x.shape[-2:])} must be divisible by 32")
        v, chk = self.variant, self._chk
        contour = None
        if v is ModelVariant.CASCADE1:
            cfeat = chk("contour_decoder", self.contour_decoder(self.contour_encoder(x)))
            contour = chk("contour_head", self.contour_head(cfeat))
            up = F.interpolate(self._contour_for_merge(contour), size=x.shape[-2:], mode="bilinear", align_corners=False)
            x = torch.cat([x, up], dim=1)
        feats = self.encoder(x)
        chk("encoder", feats[-1])
        feat = chk("decoder", self.decoder(feats))
        if v is ModelVariant.AUX1:
            cfeat = chk("contour_decoder", self.contour_decoder(feats))
            contour = chk("contour_head", self.contour_head(cfeat))
        elif v in (ModelVariant.AUX2, ModelVariant.CASCADE2):
            contour = chk("contour_head", self.contour_head(feat))
        if v is ModelVariant.CASCADE2:
            feat = chk("merge", self.merge(torch.cat([feat, self._contour_for_merge(contour)], dim=1)))
        score, distances, angle = self.detection_head(feat)
        for name, t in (("score", score), ("distances", distances), ("angle", angle)):
            chk(f"detection_head.{name}", t)
        return NetworkOutputs(score=score, distances=distances, angle=angle, contour=contour)

    def task_subsystems(self) -> tuple[tuple, tuple]:
        return _TASK_SUBSYSTEMS[self.variant]


def build_model(variant, backbone: BackboneConfig | None = None, seed: int | None = None,
                stop_contour_gradient: bool = False) -> TextContourNet:
    if seed is not None:
        torch.manual_seed(seed)
    net = TextContourNet(variant, backbone, stop_contour_gradient)
    if net.backbone.pretrained_id:
        load_pretrained_encoder(net, net.backbone.pretrained_id)
    return net


def load_pretrained_encoder(net: TextContourNet, source) -> int:
    """Copy ``encoder.*`` tensors from a state dict or checkpoint file into every encoder.

    Tensors whose shape does not match (the 4-channel cascade1 stem) are skipped.
    Returns the number of tensors copied.
    """
    payload = torch.load(source, map_location="cpu", weights_only=False)
    state = payload.get("model", payload) if isinstance(payload, dict) else payload
    enc = {k[len("encoder."):]: v for k, v in state.items() if k.startswith("encoder.")}
    if not enc:
        raise ConfigError(f"{source} holds no encoder.* parameters")
    copied = 0
    for name in ("encoder", "contour_encoder"):
        target = getattr(net, name, None)
        if target is None:
            continue
        own = target.state_dict()
        fit = {k: v for k, v in enc.items() if k in own and own[k].shape == v.shape}
        skipped = len(own) - len(fit)
        if skipped:
            log.warning("pretrained %s: %d tensors left at initialization", name, skipped)
        target.load_state_dict(fit, strict=False)
        copied += len(fit)
    return copied


def _count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def count_shared_parameters(net: TextContourNet) -> dict:
    """Parameter counts per subsystem and which subsystems both tasks use."""
    contour_parts, det_parts = net.task_subsystems()
    names = [n for n, _ in net.named_children()]
    counts = {n: _count(getattr(net, n)) for n in names}
    shared = [n for n in det_parts if n in contour_parts]
    return {
        "variant": net.variant.value,
        "subsystems": counts,
        "contour": list(contour_parts),
        "detection": list(det_parts),
        "shared": shared,
        "shared_parameters": sum(counts[n] for n in shared),
        "total_parameters": _count(net),
    }


def preprocess_images(images, device=None) -> torch.Tensor:
    """``N x H x W x 3`` uint8 (or a single image) to normalized ``N x 3 x H x W`` float."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected N x H x W x 3 images, got shape {arr.shape}")
    x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32) / 255.0)
    x = x - torch.tensor(IMAGE_MEAN, dtype=torch.float32)
    x = x.permute(0, 3, 1, 2).contiguous()
    return x if device is None else x.to(device)
