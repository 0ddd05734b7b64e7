"""Command-line frontend: ``contourdet <subcommand> ...``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime failures; a
runtime failure prints ``error[<category>]: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

log = logging.getLogger("contourdet")

# Subcommand handlers import their modules lazily so that ``--help`` and usage
# errors return without loading torch.


def _thresholds(text: str) -> list[float]:
    try:
        vals = sorted(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from exc
    if not vals or any(not 0 < v <= 1 for v in vals):
        raise argparse.ArgumentTypeError("thresholds must lie in (0, 1]")
    return vals


def _common(p):
    p.add_argument("--deterministic", action="store_true",
                   help="suppress wall-clock fields and force deterministic kernels")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contourdet", description="Contour-assisted scene text detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a YAML run config")
    p.add_argument("--config", required=True, help="run config file (YAML)")
    p.add_argument("--out-dir", required=True, help="directory for train_log.csv and checkpoints/")
    p.add_argument("--resume", help="checkpoint to resume from")
    _common(p)

    p = sub.add_parser("predict", help="detect text in a directory of images")
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    p.add_argument("--input-dir", required=True, help="directory of images")
    p.add_argument("--out-dir", required=True, help="directory for <image>.txt prediction files")
    p.add_argument("--overlay", action="store_true", help="also write detection + contour overlays")
    p.add_argument("--score-threshold", type=float, help="override the checkpoint's score threshold")
    p.add_argument("--nms-iou", type=float, help="override the checkpoint's NMS IoU")
    _common(p)

    for name, helptext in (("eval", "score prediction files against ground truth"),
                           ("sweep-iou", "P/R/F1 table over IoU thresholds 0.50..0.90")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--pred-dir", required=True, help="prediction files (x1,y1,...,x4,y4,score)")
        p.add_argument("--gt-dir", required=True, help="ICDAR ground-truth files")
        default = "0.5" if name == "eval" else ",".join(f"{0.5 + 0.05 * i:.2f}" for i in range(9))
        p.add_argument("--thresholds", type=_thresholds, default=_thresholds(default),
                       help=f"comma-separated IoU thresholds (default {default})")
        p.add_argument("--out", help="write the comma-separated table here")
        _common(p)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="synthetic config file (YAML); key n = image count")
    p.add_argument("--out-dir", required=True, help="dataset directory to create")
    p.add_argument("--n", type=int, help="override the image count")
    _common(p)

    p = sub.add_parser("render-targets", help="write training targets and QA images for a dataset")
    p.add_argument("--data-dir", required=True, help="dataset directory (manifest.json or images/ + gt/)")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--limit", type=int, help="render at most this many samples")
    p.add_argument("--shrink-ratio", type=float, default=0.3, help="score-map shrink ratio")
    _common(p)

    p = sub.add_parser("plot", help="render a figure")
    p.add_argument("--kind", required=True, choices=("loss_curves", "f1_vs_iou", "target_overlay", "detection_overlay"))
    p.add_argument("--log", help="training log (loss_curves)")
    p.add_argument("--table", action="append", help="sweep table CSV (f1_vs_iou); repeatable")
    p.add_argument("--image", help="image file (overlays)")
    p.add_argument("--gt", help="ground-truth file (target_overlay)")
    p.add_argument("--pred", help="prediction file (detection_overlay)")
    p.add_argument("--out", required=True, help="output image path")
    _common(p)
    return parser


def _image_files(directory: Path):
    from .datasets import IMAGE_SUFFIXES

    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _strip(stem: str, prefix: str) -> str:
    return stem[len(prefix):] if stem.startswith(prefix) else stem


def _load_pred_gt(pred_dir, gt_dir):
    from .datasets import parse_icdar_gt
    from .postprocess import read_predictions

    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    if not gt_dir.is_dir():
        raise FileNotFoundError(f"ground-truth directory {gt_dir} not found")
    if not pred_dir.is_dir():
        raise FileNotFoundError(f"prediction directory {pred_dir} not found")
    preds = {_strip(p.stem, "res_"): p for p in pred_dir.glob("*.txt")}
    dets, gts = [], []
    for gt in sorted(gt_dir.glob("*.txt")):
        key = _strip(gt.stem, "gt_")
        gts.append(parse_icdar_gt(gt))
        dets.append(read_predictions(preds[key]) if key in preds else [])
    return dets, gts


def cmd_train(args):
    import torch

    from .training import load_run_config, train

    cfg = load_run_config(args.config)
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    run = train(cfg, out_dir=args.out_dir, resume_from=args.resume, deterministic=args.deterministic)
    last = run.history[-1] if run.history else None
    print(f"trained {cfg.variant.value}: {run.steps} steps, "
          f"final l_total={last.l_total:.4f}" if last else f"trained {cfg.variant.value}: nothing to do")
    print(f"checkpoint: {run.checkpoint_path}")


def cmd_predict(args):
    from dataclasses import replace

    from .datasets import read_image
    from .training import load_checkpoint, predict

    _, cfg, _ = load_checkpoint(args.checkpoint)
    decode = cfg.decode
    if args.score_threshold is not None:
        decode = replace(decode, score_threshold=args.score_threshold)
    if args.nms_iou is not None:
        decode = replace(decode, nms_iou=args.nms_iou)
    files = _image_files(Path(args.input_dir))
    images = [read_image(f) for f in files]
    results = predict(args.checkpoint, images, decode, args.out_dir, [f.stem for f in files], args.overlay)
    print(f"predicted {sum(map(len, results))} detections in {len(files)} images -> {args.out_dir}")


def cmd_eval(args):
    from .evaluation import format_table, summary_line, match_and_score, sweep_iou

    dets, gts = _load_pred_gt(args.pred_dir, args.gt_dir)
    rows = sweep_iou(dets, gts, args.thresholds)
    for t in args.thresholds:
        print(summary_line(match_and_score(dets, gts, t)))
    table = format_table(rows)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    else:
        sys.stdout.write(table)


def cmd_synth(args):
    from .datasets import SynthConfig, generate_synthetic, save_dataset

    with open(args.config, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    n = int(args.n if args.n is not None else raw.pop("n", 8))
    raw.pop("n", None)
    cfg = SynthConfig(**raw)
    samples = generate_synthetic(cfg, n)
    manifest = save_dataset(samples, args.out_dir)
    print(f"wrote {n} images with {sum(len(s.instances) for s in samples)} words -> {manifest}")


def cmd_render_targets(args):
    from .datasets import DatasetSpec, load_dataset
    from .reporting import render_targets
    from .targets import AnnotatedImage, TargetConfig, build_targets
    from .training import pad_to_multiple

    samples = load_dataset(DatasetSpec(args.data_dir, split="", format="synthetic"))
    if args.limit is not None:
        samples = samples[: args.limit]
    cfg = TargetConfig(shrink_ratio=args.shrink_ratio)
    for s in samples:
        image, _ = pad_to_multiple(s.image, cfg.stride)
        s = AnnotatedImage(image, s.instances, s.name)
        render_targets(s, build_targets(s, cfg), args.out_dir)
    print(f"rendered targets for {len(samples)} samples -> {args.out_dir}")


def cmd_plot(args):
    from . import reporting
    from .datasets import parse_icdar_gt, read_image, write_image
    from .postprocess import read_predictions
    from .targets import AnnotatedImage, build_targets
    from .training import pad_to_multiple

    need = {"loss_curves": ["log"], "f1_vs_iou": ["table"], "target_overlay": ["image", "gt"],
            "detection_overlay": ["image", "pred"]}[args.kind]
    missing = [f"--{n}" for n in need if not getattr(args, n)]
    if missing:
        raise ValueError(f"--kind {args.kind} requires {' '.join(missing)}")
    inputs = sum(([v] if isinstance(v, str) else v for v in (getattr(args, n) for n in need)), [])
    reporting.PlotSpec(args.kind, inputs, args.out)
    if args.kind == "loss_curves":
        reporting.plot_loss_curves(args.log, args.out)
    elif args.kind == "f1_vs_iou":
        reporting.plot_f1_vs_iou(args.table, args.out)
    elif args.kind == "target_overlay":
        image, _ = pad_to_multiple(read_image(args.image), 4)
        sample = AnnotatedImage(image, parse_icdar_gt(args.gt))
        write_image(args.out, reporting.target_overlay(image, build_targets(sample)))
    else:
        reporting.draw_detection_overlay(args.out, read_image(args.image), read_predictions(args.pred))
    print(f"wrote {args.out}")


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sweep-iou": cmd_eval,
    "synth": cmd_synth,
    "render-targets": cmd_render_targets,
    "plot": cmd_plot,
}


def _category(exc: BaseException) -> str:
    from .datasets import IcdarFormatError
    from .geometry import GeometryError
    from .training import TrainingDiverged

    if isinstance(exc, IcdarFormatError):
        return "data"
    if isinstance(exc, (FileNotFoundError, OSError)):
        return "io"
    if isinstance(exc, (TrainingDiverged, FloatingPointError)):
        return "numeric"
    if isinstance(exc, GeometryError):
        return "geometry"
    if isinstance(exc, (ValueError, TypeError, KeyError, yaml.YAMLError)):
        return "config"
    return "runtime"


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001
        print(f"error[{_category(exc)}]: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
