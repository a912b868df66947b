"""Command-line interface: ``matssl <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 training aborted.
``MATSSL_THREADS`` caps BLAS threads (default 1, which keeps runs bit-reproducible).
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, RunConfig
from .data import (ImageRecord, ParseError, PatchDataset, SyntheticSpec, build_patch_dataset, carve_validation,
                   dominant_phase, encode_netpbm, generate_synthetic, load_directory, mask_name, materialize,
                   save_image, split_dataset)
from .encoder import check_against, init_params
from .segment import confusion_matrix, decoder_shapes, init_decoder, iou_from_confusion
from .tensor import ShapeError
from .train import (LabeledSet, TrainingAborted, checkpoint_of, evaluate, metrics_csv, pretrain_source,
                    run_finetune, run_ssl)

log = logging.getLogger("matssl")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 2, 3
# config sections that describe the model and training, as opposed to file locations
SNAPSHOT_SECTIONS = ("train", "augment", "encoder", "head", "decoder", "metadata")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


@contextmanager
def thread_limit():
    raw = os.environ.get("MATSSL_THREADS", "1")
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"MATSSL_THREADS must be a positive integer, got {raw!r}") from None
    with threadpool_limits(limits=n):
        yield


def _snapshot(cfg: RunConfig) -> dict:
    full = cfg.to_dict()
    return {k: full[k] for k in SNAPSHOT_SECTIONS}


def _write_text(path: Path, text: str) -> None:
    path.write_bytes(text.encode("utf-8"))


def _load_config(args, phase: str) -> RunConfig:
    cfg = RunConfig.load(args.config, phase) if args.config else RunConfig.from_dict({}, phase)
    raw = cfg.to_dict()
    overrides = {("data", "image_dir"): args.image_dir, ("data", "manifest"): args.manifest,
                 ("output", "dir"): args.output, ("init", "encoder"): getattr(args, "encoder_init", None),
                 ("train", "seed"): args.seed, ("train", "epochs"): args.epochs}
    for (section, key), value in overrides.items():
        if value is not None:
            raw[section][key] = value
    return RunConfig.from_dict(raw, phase)


def _dataset(cfg: RunConfig) -> tuple[PatchDataset, dict[str, ImageRecord]]:
    if not cfg.data.image_dir:
        raise ConfigError("no image directory given", "data.image_dir")
    if not cfg.data.manifest:
        raise ConfigError("no manifest given", "data.manifest")
    image_dir, manifest = Path(cfg.data.image_dir), Path(cfg.data.manifest)
    if not image_dir.is_dir():
        raise ConfigError(f"{str(image_dir)!r} is not a directory", "data.image_dir")
    if not manifest.is_file():
        raise ConfigError(f"{str(manifest)!r} does not exist", "data.manifest")
    dataset = PatchDataset.read(manifest)
    images = {img.id: img for img in load_directory(image_dir)}
    missing = sorted({e.image_id for e in dataset.entries} - images.keys())
    if missing:
        raise ConfigError(f"manifest references images not in {str(image_dir)!r}: {', '.join(missing[:5])}",
                          "data.manifest")
    dataset.check_bounds(images)
    return dataset, images


def _encoder(cfg: RunConfig, seed: int):
    path = cfg.encoder_init_path()
    if path is None:
        return init_params(cfg.encoder, seed)
    return init_params(cfg.encoder, seed, source="checkpoint", checkpoint=path)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / "config.toml")
    return out


def _save(params, cfg: RunConfig, epoch: int, path: Path) -> None:
    checkpoint_of(params, _snapshot(cfg), epoch, cfg.train.seed).save(path)
    log.info("wrote %s", path)


# ---------------------------------------------------------------------------
# data commands


def cmd_synth(args) -> int:
    width = args.width or args.size
    height = args.height or args.size
    if width < 1 or height < 1:
        raise UsageError("image size must be positive")
    spec = SyntheticSpec(seed=args.seed, grain_count=args.grains, phase_count=args.phases, noise_std=args.noise,
                         stripe_phase=args.stripe_phase, stripe_period=args.stripe_period,
                         stripe_contrast=args.stripe_contrast)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = generate_synthetic(spec, width, height, args.count, start=args.start)
    for rec in records:
        save_image(rec, out / f"{rec.id}.pgm", out / f"{mask_name(rec.id)}.pgm")
    tag = args.split
    lines = "".join(f"{r.id}\t0\t0\t{min(width, height)}\t{tag}\n" for r in records)
    _write_text(out / "manifest.tsv", lines)
    print(f"wrote {len(records)} image/mask pairs to {out}")
    return EXIT_OK


def cmd_patchify(args) -> int:
    images = load_directory(args.input)
    if not images:
        raise UsageError(f"no img_*.pgm/.ppm files in {args.input}")
    failed = [f"{img.id}: patch {args.patch} exceeds {img.width}x{img.height}" for img in images
              if args.patch > min(img.width, img.height)]
    if failed:
        for msg in failed:
            print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    if args.split_ratio >= 1.0:
        assignment = {img.id: "train" for img in images}
    else:
        assignment = split_dataset(images, args.split_ratio, args.seed, holdout="test")
    if args.val_ratio:
        assignment = carve_validation(assignment, args.val_ratio, args.seed)
    dataset = build_patch_dataset(images, args.patch, args.overlap, assignment)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataset.write(out)
    for split, n in sorted(dataset.counts().items()):
        print(f"{split}\t{n}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training commands


def cmd_pretrain_source(args) -> int:
    cfg = _load_config(args, "source_pretrain")
    dataset, images = _dataset(cfg)
    patches = [p for p in materialize(dataset, images, ("train", "val", "unlabeled")) if p.mask is not None]
    if not patches:
        raise ConfigError("no labeled non-test patches for source pretraining", "data.manifest")
    classes = cfg.data.source_classes or int(max(dominant_phase(p.mask) for p in patches)) + 1
    classes = max(classes, 2)
    encoder = _encoder(cfg, cfg.train.seed)
    out = _outdir(cfg)
    result = pretrain_source(cfg.train, patches, encoder, cfg.encoder, classes, cfg.augment)
    _write_text(out / "metrics.csv", result.csv())
    _save(encoder, cfg, cfg.train.epochs, out / "source_final.ckpt")
    return EXIT_OK


def cmd_ssl(args) -> int:
    cfg = _load_config(args, "ssl")
    dataset, images = _dataset(cfg)
    patches = materialize(dataset, images, ("train", "val", "unlabeled"))
    if not patches:
        raise ConfigError("no non-test patches for SSL", "data.manifest")
    encoder = _encoder(cfg, cfg.train.seed)
    out = _outdir(cfg)
    result = run_ssl(cfg.train, patches, encoder, cfg.encoder, cfg.augment, cfg.head)
    _write_text(out / "metrics.csv", result.csv())
    _save(encoder, cfg, cfg.train.epochs, out / "ssl_final.ckpt")
    _save(result.extra["head"], cfg, cfg.train.epochs, out / "ssl_head.ckpt")
    return EXIT_OK


def _labeled(dataset, images, split: str) -> LabeledSet | None:
    patches = materialize(dataset, images, (split,))
    if not patches:
        return None
    if any(p.mask is None for p in patches):
        raise ConfigError(f"{split} patches need masks (mask_*.pgm next to each image)", "data.image_dir")
    return LabeledSet.from_records(patches)


def cmd_finetune(args) -> int:
    cfg = _load_config(args, "finetune")
    dataset, images = _dataset(cfg)
    train = _labeled(dataset, images, "train")
    if train is None:
        raise ConfigError("manifest has no train patches", "data.manifest")
    val, test = _labeled(dataset, images, "val"), _labeled(dataset, images, "test")
    encoder = _encoder(cfg, cfg.train.seed)
    out = _outdir(cfg)
    meta = cfg.metadata
    result = run_finetune(cfg.train, train, encoder, cfg.encoder, cfg.decoder, val=val, test=test,
                          aug=cfg.augment, miou_convention=meta.miou_convention, absent=meta.absent_class_rule)
    rows = list(result.rows)
    if test is not None:
        report = result.extra["test"]
        key = "miou" if meta.miou_convention == "pooled" else "miou_per_image"
        rows.append({"epoch": result.extra["best_epoch"], "phase": "test", "miou": report[key]})
        ids = [e.image_id + f"@{e.x},{e.y}" for e in dataset.split("test")]
        _write_text(out / "test_report.csv", report_csv(ids, report["pred"], test.masks, cfg))
    _write_text(out / "metrics.csv", metrics_csv(rows, 0))
    _save(result.params, cfg, result.extra["best_epoch"], out / "finetune_best.ckpt")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluation


def report_csv(ids: Sequence[str], pred: np.ndarray, truth: np.ndarray, cfg: RunConfig) -> str:
    """Per-image rows, then pooled and per-image-mean rows; IoU per class in ``iou_<k>`` columns."""
    k = cfg.decoder.num_classes
    absent = cfg.metadata.absent_class_rule
    header = ["scope", "image", "miou"] + [f"iou_{c}" for c in range(k)]
    lines = [header]

    def row(scope, name, cm):
        per_class, mean = iou_from_confusion(cm, absent)
        return [scope, name, _num(mean)] + [_num(v) for v in per_class]

    image_means = []
    for name, p, t in zip(ids, pred, truth):
        r = row("image", name, confusion_matrix(p, t, k))
        image_means.append(iou_from_confusion(confusion_matrix(p, t, k), absent)[1])
        lines.append(r)
    lines.append(row("pooled", "", confusion_matrix(pred, truth, k)))
    lines.append(["per_image_mean", "", _num(float(np.mean(image_means)))] + [""] * k)
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(lines)
    return buf.getvalue()


def _num(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def cmd_eval(args) -> int:
    try:
        ckpt = Checkpoint.load(args.checkpoint)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint: {exc}") from None
    cfg = RunConfig.from_dict({**ckpt.config, "data": {"image_dir": args.image_dir, "manifest": args.manifest}},
                              "finetune")
    dataset, images = _dataset(cfg)
    data = _labeled(dataset, images, args.split)
    if data is None:
        raise ConfigError(f"manifest has no {args.split!r} patches", "data.manifest")
    encoder = init_params(cfg.encoder, 0, source="checkpoint", checkpoint=ckpt)
    decoder = init_decoder(cfg.encoder, cfg.decoder)
    stored = ckpt.subset("decoder.")
    check_against(decoder_shapes(cfg.encoder, cfg.decoder), stored)
    for name, t in decoder.items():
        t.data[...] = stored[name]
    result = evaluate(data, encoder, decoder, cfg.encoder, cfg.decoder, cfg.augment, cfg.metadata.absent_class_rule)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = dataset.split(args.split)
    ids = [f"{e.image_id}@{e.x},{e.y}" for e in entries]
    _write_text(out / "report.csv", report_csv(ids, result["pred"], data.masks, cfg))
    for e, pred in zip(entries, result["pred"]):
        (out / f"pred_{e.image_id}_{e.x}_{e.y}.pgm").write_bytes(encode_netpbm(pred.astype(np.uint8)))
    print(f"pooled mIoU {result['miou']:.4f}  per-image mIoU {result['miou_per_image']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# plotting


class CsvFormatError(ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def read_series(path: Path, metric: str) -> list[tuple[float, float]] | None:
    """(epoch, value) points of ``metric``; None when the column is absent or empty."""
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise CsvFormatError(path, 0, f"cannot read: {exc}") from None
    rows = list(csv.reader(text.splitlines()))
    if not rows or not rows[0]:
        raise CsvFormatError(path, 1, "missing header")
    header = rows[0]
    points = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvFormatError(path, lineno, f"expected {len(header)} fields, got {len(row)}")
        rec = dict(zip(header, row))
        for key in ("epoch", metric):
            if rec.get(key):
                try:
                    float(rec[key])
                except ValueError:
                    raise CsvFormatError(path, lineno, f"{key} value {rec[key]!r} is not a number") from None
        if "epoch" in rec and rec["epoch"] and rec.get(metric) and rec.get("phase", "") != "test":
            points.append((float(rec["epoch"]), float(rec[metric])))
    return points or None


PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def render_svg(series: dict[str, dict[str, list[tuple[float, float]]]], metrics: Sequence[str]) -> str:
    """One panel per metric; ``series[metric]`` maps legend label -> points."""
    width, panel_h, pad = 640, 240, 50
    height = panel_h * len(metrics)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>']
    for m_idx, metric in enumerate(metrics):
        top = m_idx * panel_h
        lines = series.get(metric, {})
        pts = [p for ps in lines.values() for p in ps]
        x0, x1 = (min(p[0] for p in pts), max(p[0] for p in pts)) if pts else (0.0, 1.0)
        y0, y1 = (min(p[1] for p in pts), max(p[1] for p in pts)) if pts else (0.0, 1.0)
        if x1 == x0:
            x1 = x0 + 1.0
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5
        left, right, ptop, pbot = pad, width - 150, top + 20, top + panel_h - 35

        def sx(x):
            return left + (x - x0) / (x1 - x0) * (right - left)

        def sy(y):
            return pbot - (y - y0) / (y1 - y0) * (pbot - ptop)

        out.append(f'<text x="{left}" y="{top + 14}" font-family="sans-serif" font-size="12">'
                   f'{escape(metric)} vs epoch</text>')
        out.append(f'<polyline class="axis" fill="none" stroke="black" '
                   f'points="{left},{ptop} {left},{pbot} {right},{pbot}"/>')
        for label, y in ((f"{y1:.4g}", ptop), (f"{y0:.4g}", pbot)):
            out.append(f'<text x="{left - 4}" y="{y + 4:.2f}" text-anchor="end" font-family="sans-serif" '
                       f'font-size="10">{label}</text>')
        for label, x in ((f"{x0:.4g}", left), (f"{x1:.4g}", right)):
            out.append(f'<text x="{x}" y="{pbot + 14}" text-anchor="middle" font-family="sans-serif" '
                       f'font-size="10">{label}</text>')
        for i, (name, ps) in enumerate(lines.items()):
            color = PALETTE[i % len(PALETTE)]
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in ps)
            out.append(f'<polyline class="series" data-label="{escape(name)}" fill="none" stroke="{color}" '
                       f'stroke-width="1.5" points="{coords}"/>')
            ly = ptop + 14 * i + 6
            out.append(f'<line x1="{right + 10}" y1="{ly}" x2="{right + 30}" y2="{ly}" stroke="{color}" '
                       f'stroke-width="2"/>')
            out.append(f'<text x="{right + 35}" y="{ly + 4}" font-family="sans-serif" font-size="11">'
                       f'{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    if not metrics:
        raise UsageError("--metrics needs at least one column name")
    series: dict[str, dict[str, list]] = {m: {} for m in metrics}
    for path in map(Path, args.csv):
        for metric in metrics:
            try:
                points = read_series(path, metric)
            except CsvFormatError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_INVALID
            if points is None:
                print(f"warning: {path}: no {metric!r} values, series omitted", file=sys.stderr)
                continue
            series[metric][path.stem] = points
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_text(out, render_svg(series, metrics))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _train_flags(p: argparse.ArgumentParser, encoder_init: bool = True) -> None:
    p.add_argument("--config", help="TOML run configuration; built-in defaults when omitted")
    p.add_argument("--image-dir", help="directory of img_*.pgm/.ppm (+ mask_*.pgm); overrides data.image_dir")
    p.add_argument("--manifest", help="patch manifest; overrides data.manifest")
    p.add_argument("--output", help="output directory; overrides output.dir")
    if encoder_init:
        p.add_argument("--encoder-init", help="'random' or an encoder checkpoint path; overrides init.encoder")
    p.add_argument("--seed", type=int, help="overrides train.seed")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="matssl", description="Self-supervised pretraining and phase segmentation of micrographs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic micrographs with phase masks")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=10, help="number of images (default 10)")
    p.add_argument("--size", type=int, default=128, help="square image side in pixels (default 128)")
    p.add_argument("--width", type=int, help="image width; overrides --size")
    p.add_argument("--height", type=int, help="image height; overrides --size")
    p.add_argument("--phases", type=int, default=2, help="number of phases, >= 2 (default 2)")
    p.add_argument("--grains", type=int, default=16, help="Voronoi grains per image (default 16)")
    p.add_argument("--noise", type=float, default=8.0, help="Gaussian noise std in gray levels (default 8)")
    p.add_argument("--stripe-phase", type=int, help="phase index that carries a stripe texture")
    p.add_argument("--stripe-period", type=int, default=6, help="stripe period in pixels (default 6)")
    p.add_argument("--stripe-contrast", type=int, default=50, help="stripe brightness offset (default 50)")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--start", type=int, default=0, help="index of the first image (default 0)")
    p.add_argument("--split", default="unlabeled", choices=("train", "val", "test", "unlabeled"),
                   help="split tag written to manifest.tsv (default unlabeled)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("patchify", help="cut images into overlapping patches and write a manifest")
    p.add_argument("--input", required=True, help="directory of img_*.pgm/.ppm")
    p.add_argument("--out", required=True, help="manifest path to write")
    p.add_argument("--patch", type=int, default=256, help="patch side in pixels (default 256)")
    p.add_argument("--overlap", type=float, default=0.0, help="overlap fraction in [0, 1) (default 0)")
    p.add_argument("--split-ratio", type=float, default=0.8,
                   help="fraction of images in train, the rest in test; 1 puts all in train (default 0.8)")
    p.add_argument("--val-ratio", type=float, default=0.0,
                   help="fraction of the train images moved to a val split for model selection (default 0)")
    p.add_argument("--seed", type=int, default=0, help="split seed (default 0)")
    p.set_defaults(func=cmd_patchify)

    p = sub.add_parser("pretrain-source", help="supervised dominant-phase pretraining of the encoder")
    _train_flags(p)
    p.set_defaults(func=cmd_pretrain_source)
    p = sub.add_parser("ssl", help="contrastive adaptation with gated multi-stage fusion")
    _train_flags(p)
    p.set_defaults(func=cmd_ssl)
    p = sub.add_parser("finetune", help="Dice fine-tuning of encoder and decoder")
    _train_flags(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="score a fine-tuned checkpoint and write predicted masks")
    p.add_argument("--checkpoint", required=True, help="finetune checkpoint (encoder + decoder)")
    p.add_argument("--image-dir", required=True, help="directory of images and masks")
    p.add_argument("--manifest", required=True, help="patch manifest")
    p.add_argument("--split", default="test", help="manifest split to evaluate (default test)")
    p.add_argument("--out", required=True, help="output directory for report.csv and pred_*.pgm")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="SVG line charts of metrics CSVs, one series per file")
    p.add_argument("csv", nargs="+", help="metrics CSV files")
    p.add_argument("--out", required=True, help="SVG path to write")
    p.add_argument("--metrics", default="miou,loss", help="comma-separated columns to plot (default miou,loss)")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except TrainingAborted as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (UsageError, ConfigError, CheckpointError, ParseError, ShapeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
