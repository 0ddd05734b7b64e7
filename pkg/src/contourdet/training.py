"""Training loop, run configuration, checkpoints and batch inference."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch
import yaml

from .datasets import DatasetSpec, augment, load_dataset, sample_rng
from .geometry import Detection
from .losses import LossReport, LossWeights, NonFiniteLossError, contour_loss, joint_loss
from .model import (
    BackboneConfig,
    ModelVariant,
    NonFiniteOutputError,
    TextContourNet,
    build_model,
    check_input_size,
    preprocess_images,
)
from .postprocess import DecodeConfig, detect, write_predictions
from .targets import AnnotatedImage, TargetConfig, TargetMaps, TextInstance, build_targets

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "contourdet-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, step):
        super().__init__(msg)
        self.step = step


@dataclass
class Stage:
    input_size: int
    steps: int
    learning_rate: float = 1e-3

    def __post_init__(self):
        check_input_size(self.input_size)
        if self.steps <= 0:
            raise ValueError("stage steps must be positive")


def _default_stages():
    return [Stage(256, 1000, 1e-3), Stage(384, 500, 1e-4)]


@dataclass
class RunConfig:
    variant: ModelVariant = ModelVariant.CASCADE2
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    stages: list = field(default_factory=_default_stages)
    batch_size: int = 8
    seed: int = 0
    dataset: DatasetSpec | None = None
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    targets: TargetConfig = field(default_factory=TargetConfig)
    grad_clip: float = 5.0
    checkpoint_every: int = 500
    contour_warmup_steps: int = 0
    stop_contour_gradient: bool = False

    def __post_init__(self):
        self.variant = ModelVariant(self.variant)
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]
        if not self.stages:
            raise ValueError("at least one training stage is required")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sub = {"backbone": BackboneConfig, "weights": LossWeights, "decode": DecodeConfig,
               "targets": TargetConfig, "dataset": DatasetSpec}
        for key, typ in sub.items():
            if isinstance(d.get(key), dict):
                d[key] = typ(**d[key])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        for key in ("stage_channels", "decoder_channels"):
            d["backbone"][key] = list(d["backbone"][key])
        if d["dataset"] and d["dataset"].get("augmentation"):
            d["dataset"]["augmentation"]["scale_range"] = list(d["dataset"]["augmentation"]["scale_range"])
        return d


def load_run_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(yaml.safe_load(fh) or {})


def dump_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


@dataclass
class TrainResult:
    model: TextContourNet
    history: list[LossReport]
    steps: int
    batch_hashes: list[str]
    log_path: Path | None = None
    checkpoint_path: Path | None = None


def resize_sample(sample: AnnotatedImage, size: int) -> AnnotatedImage:
    H, W = sample.image.shape[:2]
    if (H, W) == (size, size):
        return sample
    image = cv2.resize(sample.image, (size, size), interpolation=cv2.INTER_LINEAR)
    scale = np.array([size / W, size / H])
    inst = [TextInstance(i.quad * scale, i.text, i.dont_care) for i in sample.instances]
    return AnnotatedImage(image, inst, sample.name)


def batch_hash(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest()[:16]


def collate_targets(maps: list[TargetMaps]) -> dict:
    def stack(key, add_channel):
        arr = np.stack([getattr(m, key) for m in maps]).astype(np.float32)
        return torch.from_numpy(arr[:, None] if add_channel else arr)

    return {
        "contour": stack("contour", True),
        "score": stack("score", True),
        "distances": stack("distances", False),
        "angle": stack("angle", True),
        "ignore": stack("ignore", True),
    }


class BatchStream:
    """Deterministic batches for one stage.

    Sample order is a fresh permutation per epoch drawn from ``(seed, stage,
    epoch)``; augmentation draws from ``(seed, stage, step, slot)``, so any
    step's batch can be rebuilt without replaying earlier ones.
    """

    def __init__(self, samples, cfg: RunConfig, stage_index: int):
        self.samples = samples
        self.cfg = cfg
        self.stage_index = stage_index
        self.size = cfg.stages[stage_index].input_size
        aug = cfg.dataset.augmentation if cfg.dataset else None
        self.augment = dataclasses.replace(aug, crop_size=self.size) if aug else None
        self._cache = {}

    def indices(self, step: int) -> list[int]:
        n, b = len(self.samples), self.cfg.batch_size
        out = []
        for pos in range(step * b, step * b + b):
            epoch, k = divmod(pos, n)
            perm = sample_rng(self.cfg.seed, self.stage_index, epoch).permutation(n)
            out.append(int(perm[k]))
        return out

    def _prepared(self, idx, step, slot):
        if self.augment is None:
            if idx not in self._cache:
                s = resize_sample(self.samples[idx], self.size)
                self._cache[idx] = (s.image, build_targets(s, self.cfg.targets))
            return self._cache[idx]
        rng = sample_rng(self.cfg.seed, self.stage_index, step, slot)
        s = augment(self.samples[idx], self.augment, rng)
        return s.image, build_targets(s, self.cfg.targets)

    def batch(self, step: int):
        prepared = [self._prepared(i, step, slot) for slot, i in enumerate(self.indices(step))]
        images = np.stack([p[0] for p in prepared])
        return images, collate_targets([p[1] for p in prepared])


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def save_checkpoint(path, net, opt, cfg: RunConfig, stage: int, step_in_stage: int, global_step: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "model": net.state_dict(),
        "optimizer": None if opt is None else opt.state_dict(),
        "stage": stage,
        "step_in_stage": step_in_stage,
        "global_step": global_step,
    }, path)
    return path


def load_checkpoint(path):
    """Return ``(net, cfg, payload)``; the net is in eval mode."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a contourdet checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = RunConfig.from_dict(payload["config"])
    # the saved weights supersede any pretrained source named in the config
    backbone = dataclasses.replace(cfg.backbone, pretrained_id=None)
    net = build_model(cfg.variant, backbone, stop_contour_gradient=cfg.stop_contour_gradient)
    net.load_state_dict(payload["model"])
    net.eval()
    return net, cfg, payload


def log_columns(variant: ModelVariant, deterministic: bool) -> list[str]:
    cols = ["stage", "step", "l_score", "l_iou", "l_theta", "l_geo"]
    if variant.has_contour:
        cols.append("l_contour")
    cols += ["l_total", "lr", "batch_hash"]
    if not deterministic:
        cols.append("wall_time")
    return cols


def read_training_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def train(cfg: RunConfig, samples=None, out_dir=None, resume_from=None, callback=None,
          deterministic: bool = True) -> TrainResult:
    """Run every stage of ``cfg`` in order.

    ``samples`` overrides ``cfg.dataset``.  With ``out_dir`` set, a CSV log
    (``train_log.csv``) and checkpoints (``checkpoints/``) are written there.
    ``callback(global_step, net)`` may return True to stop early.
    """
    if samples is None:
        if cfg.dataset is None:
            raise ValueError("no training samples and no dataset configured")
        samples = load_dataset(cfg.dataset)
    if not samples:
        raise ValueError("training set is empty")
    torch.manual_seed(cfg.seed)
    net = build_model(cfg.variant, cfg.backbone, seed=cfg.seed, stop_contour_gradient=cfg.stop_contour_gradient)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.stages[0].learning_rate)
    start_stage, start_step, global_step = 0, 0, 0
    if resume_from is not None:
        payload = torch.load(resume_from, map_location="cpu", weights_only=False)
        net.load_state_dict(payload["model"])
        if payload.get("optimizer"):
            opt.load_state_dict(payload["optimizer"])
        start_stage, start_step, global_step = payload["stage"], payload["step_in_stage"], payload["global_step"]
        if start_step >= cfg.stages[start_stage].steps:
            start_stage, start_step = start_stage + 1, 0

    out_dir = Path(out_dir) if out_dir else None
    writer = fh = None
    cols = log_columns(cfg.variant, deterministic)
    log_path = ckpt_path = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        append = resume_from is not None and log_path.exists()
        fh = open(log_path, "a" if append else "w", newline="", encoding="utf-8")
        writer = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        if not append:
            writer.writeheader()

    history, hashes = [], []
    t0 = time.time()
    stopped = False
    si, k = start_stage, start_step - 1
    try:
        for si in range(start_stage, len(cfg.stages)):
            stage = cfg.stages[si]
            _set_lr(opt, stage.learning_rate)
            stream = BatchStream(samples, cfg, si)
            for k in range(start_step if si == start_stage else 0, stage.steps):
                images, targets = stream.batch(k)
                hashes.append(batch_hash(images))
                net.train()
                try:
                    outputs = net(preprocess_images(images))
                    total, report = joint_loss(outputs, targets, cfg.weights)
                except (NonFiniteLossError, NonFiniteOutputError) as exc:
                    raise TrainingDiverged(f"step {global_step}: {exc}", global_step) from exc
                if global_step < cfg.contour_warmup_steps and outputs.contour is not None:
                    total = contour_loss(outputs.contour, targets["contour"], 1.0 - targets["ignore"])
                opt.zero_grad(set_to_none=True)
                total.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.grad_clip)
                opt.step()
                history.append(report)
                if writer:
                    row = {"stage": si, "step": global_step, "l_score": repr(report.l_score),
                           "l_iou": repr(report.l_iou), "l_theta": repr(report.l_theta),
                           "l_geo": repr(report.l_geo), "l_total": repr(report.l_total),
                           "lr": repr(stage.learning_rate), "batch_hash": hashes[-1]}
                    if report.l_contour is not None:
                        row["l_contour"] = repr(report.l_contour)
                    if not deterministic:
                        row["wall_time"] = f"{time.time() - t0:.3f}"
                    writer.writerow(row)
                global_step += 1
                if out_dir and cfg.checkpoint_every and global_step % cfg.checkpoint_every == 0:
                    ckpt_path = save_checkpoint(out_dir / "checkpoints" / "last.pt", net, opt, cfg, si, k + 1, global_step)
                if callback is not None and callback(global_step - 1, net):
                    stopped = True
                    break
            if stopped:
                break
            log.info("stage %d (%dpx) finished at step %d", si, stage.input_size, global_step)
    finally:
        if fh:
            fh.close()
    if out_dir:
        si_last = min(si, len(cfg.stages) - 1)
        ckpt_path = save_checkpoint(out_dir / "checkpoints" / "last.pt", net, opt, cfg, si_last,
                                    k + 1 if stopped else cfg.stages[si_last].steps, global_step)
    net.eval()
    return TrainResult(net, history, global_step, hashes, log_path, ckpt_path)


def pad_to_multiple(image: np.ndarray, multiple: int = 32, value: int = 128):
    """Pad bottom/right so both sides are multiples; returns ``(image, (pad_h, pad_w))``."""
    H, W = image.shape[:2]
    ph, pw = (-H) % multiple, (-W) % multiple
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw), (0, 0)), constant_values=value)
    return image, (ph, pw)


@torch.no_grad()
def predict_maps(net: TextContourNet, image: np.ndarray) -> dict:
    net.eval()
    padded, _ = pad_to_multiple(image)
    return net(preprocess_images(padded)).numpy()


def predict_image(net, image, decode: DecodeConfig | None = None) -> tuple[list[Detection], dict]:
    maps = predict_maps(net, image)
    dets = detect(maps["score"][0, 0], maps["distances"][0], maps["angle"][0, 0], decode)
    return dets, maps


def predict_samples(net, samples, decode: DecodeConfig | None = None) -> list[list[Detection]]:
    return [predict_image(net, s.image if hasattr(s, "image") else s, decode)[0] for s in samples]


def predict(checkpoint, images, decode: DecodeConfig | None = None, out_dir=None, names=None,
            overlay: bool = False) -> list[list[Detection]]:
    """Detect text in ``images`` with a saved model; optionally write result files."""
    from .reporting import draw_detection_overlay  # reporting imports this module

    net, cfg, _ = load_checkpoint(checkpoint)
    decode = decode or cfg.decode
    if overlay and not cfg.variant.has_contour:
        log.warning("variant %s predicts no contour; overlay flag ignored", cfg.variant.value)
        overlay = False
    names = names or [f"image_{i:05d}" for i in range(len(images))]
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for name, image in zip(names, images):
        dets, maps = predict_image(net, image, decode)
        results.append(dets)
        if out_dir:
            write_predictions(out_dir / f"{name}.txt", dets)
            if overlay:
                H, W = image.shape[:2]
                contour = maps["contour"][0, 0]
                draw_detection_overlay(out_dir / f"{name}_overlay.png", image, dets, contour[: (H + 3) // 4, : (W + 3) // 4])
    return results
