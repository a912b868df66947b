"""U-Net style decoder over the staged encoder, soft Dice loss and IoU metrics."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, encode, random_params
from .tensor import ShapeError, Tensor

PREFIX = "decoder."
DICE_EPS = 1e-6
ABSENT_RULES = ("exclude", "one", "zero")


@dataclass
class DecoderConfig:
    num_classes: int = 2
    nested_skip: bool = False

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")


@dataclass
class MaskBatch:
    labels: np.ndarray  # int [N, H, W]
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 3:
            raise ShapeError(f"labels must be [N,H,W], got {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def one_hot(self) -> np.ndarray:
        return np.moveaxis(np.eye(self.num_classes)[self.labels], -1, 1)


@dataclass
class PredBatch:
    logits: Tensor | None
    probabilities: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> "PredBatch":
        return cls(logits, T.softmax(logits, axis=1))

    def argmax(self) -> np.ndarray:
        src = self.logits if self.logits is not None else self.probabilities
        return src.data.argmax(axis=1)


def _level_channels(enc: EncoderConfig, level: int) -> int:
    return enc.channels(max(level - 1, 0))


def decoder_shapes(enc: EncoderConfig, cfg: DecoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    below = enc.channels(enc.stage_count - 1)
    for level in reversed(range(enc.stage_count)):
        if level >= 1:
            skip = enc.channels(level - 1)
            if cfg.nested_skip:
                shapes[f"{PREFIX}nest{level}.weight"] = (skip, skip + enc.channels(level), 3, 3)
                shapes[f"{PREFIX}nest{level}.bias"] = (skip,)
                skip *= 2
        else:
            skip = enc.input_channels
        out = _level_channels(enc, level)
        shapes[f"{PREFIX}level{level}.conv1.weight"] = (out, below + skip, 3, 3)
        shapes[f"{PREFIX}level{level}.conv1.bias"] = (out,)
        shapes[f"{PREFIX}level{level}.conv2.weight"] = (out, out, 3, 3)
        shapes[f"{PREFIX}level{level}.conv2.bias"] = (out,)
        below = out
    shapes[f"{PREFIX}classifier.weight"] = (cfg.num_classes, below, 1, 1)
    shapes[f"{PREFIX}classifier.bias"] = (cfg.num_classes,)
    return shapes


def init_decoder(enc: EncoderConfig, cfg: DecoderConfig, seed: int = 0) -> dict[str, Tensor]:
    return random_params(decoder_shapes(enc, cfg), np.random.default_rng([seed, 0x444543]))


def _conv(x, params, name, padding=1):
    return T.conv2d(x, params[name + ".weight"], params[name + ".bias"], padding=padding)


def segment_forward(batch: Tensor, encoder: Mapping[str, Tensor], decoder: Mapping[str, Tensor],
                    enc_cfg: EncoderConfig, cfg: DecoderConfig) -> PredBatch:
    feats = encode(batch, encoder, enc_cfg)
    maps = feats.maps
    x = maps[-1]
    for level in reversed(range(enc_cfg.stage_count)):
        up = T.upsample2x(x)
        if level >= 1:
            skip = maps[level - 1]
            if cfg.nested_skip:
                node = T.relu(_conv(T.concat([skip, T.upsample2x(maps[level])]), decoder, f"{PREFIX}nest{level}"))
                skip = T.concat([skip, node])
        else:
            skip = batch
        x = T.concat([up, skip])
        x = T.relu(_conv(x, decoder, f"{PREFIX}level{level}.conv1"))
        x = T.relu(_conv(x, decoder, f"{PREFIX}level{level}.conv2"))
    return PredBatch.from_logits(_conv(x, decoder, f"{PREFIX}classifier", padding=0))


# ---------------------------------------------------------------------------
# losses and metrics


def soft_dice(probs: Tensor, truth: MaskBatch, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over classes present in ``truth`` of 2|y.p| / (|y| + |p| + eps)."""
    n, k, h, w = probs.shape
    if k != truth.num_classes:
        raise ValueError(f"prediction has {k} classes, truth has {truth.num_classes}")
    if truth.labels.shape != (n, h, w):
        raise ShapeError(f"labels {truth.labels.shape} do not match predictions {(n, h, w)}")
    y = truth.one_hot()
    p = probs.data.astype(np.float64)
    inter = (y * p).sum(axis=(0, 2, 3))
    ysum = y.sum(axis=(0, 2, 3))
    psum = p.sum(axis=(0, 2, 3))
    den = ysum + psum + eps
    present = ysum > 0
    dice = 2.0 * inter / den
    loss = 1.0 - dice[present].mean()

    def backward(g):
        grad = (2.0 * y / den[None, :, None, None]) - (2.0 * inter / den ** 2)[None, :, None, None]
        grad *= (-g / present.sum()) * present[None, :, None, None]
        return (grad.astype(probs.data.dtype),)

    return T.record("soft_dice", np.array(loss), (probs,), backward)


def dice_loss(pred: PredBatch, truth: MaskBatch, eps: float = DICE_EPS) -> Tensor:
    return soft_dice(pred.probabilities, truth, eps)


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    """``cm[t, p]`` counts pixels with truth ``t`` predicted as ``p``."""
    pred = np.asarray(pred, np.int64).reshape(-1)
    truth = np.asarray(truth, np.int64).reshape(-1)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction and truth sizes differ: {pred.size} vs {truth.size}")
    return np.bincount(truth * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray, absent: str = "exclude") -> tuple[list[float | None], float]:
    if absent not in ABSENT_RULES:
        raise ValueError(f"absent-class rule must be one of {ABSENT_RULES}, got {absent!r}")
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    per_class: list[float | None] = []
    for i, u in zip(inter, union):
        if u > 0:
            per_class.append(float(i / u))
        else:
            per_class.append(None if absent == "exclude" else (1.0 if absent == "one" else 0.0))
    scored = [v for v in per_class if v is not None]
    return per_class, (float(np.mean(scored)) if scored else float("nan"))


def miou(pred: np.ndarray, truth: np.ndarray | MaskBatch, num_classes: int | None = None,
         absent: str = "exclude", per_image: bool = False) -> tuple[list[float | None], float]:
    """Per-class IoU and their mean.

    Pooled over all pixels by default; ``per_image`` averages each image's
    mIoU instead (per-class values are then pooled for reference).
    """
    if isinstance(truth, MaskBatch):
        num_classes = truth.num_classes
        truth = truth.labels
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if num_classes is None:
        num_classes = int(max(pred.max(), truth.max())) + 1
    cm = confusion_matrix(pred, truth, num_classes)
    per_class, mean = iou_from_confusion(cm, absent)
    if per_image:
        if truth.ndim < 3:
            raise ShapeError("per-image mIoU needs a leading image axis")
        means = [iou_from_confusion(confusion_matrix(p, t, num_classes), absent)[1] for p, t in zip(pred, truth)]
        mean = float(np.mean(means))
    return per_class, mean


def predict(images: np.ndarray, encoder: Mapping[str, Tensor], decoder: Mapping[str, Tensor],
            enc_cfg: EncoderConfig, cfg: DecoderConfig, batch_size: int = 16) -> np.ndarray:
    """Argmax class maps for normalized ``images[N,3,H,W]``, without recording gradients."""
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            pred = segment_forward(Tensor(images[start:start + batch_size]), encoder, decoder, enc_cfg, cfg)
            out.append(pred.argmax())
    return np.concatenate(out).astype(np.uint8)


def all_params(*groups: Mapping[str, Tensor]) -> dict[str, Tensor]:
    merged: dict[str, Tensor] = {}
    for g in groups:
        merged.update(g)
    return merged


def split_params(params: Mapping[str, Tensor], prefixes: Sequence[str]) -> list[dict[str, Tensor]]:
    return [{k: v for k, v in params.items() if k.startswith(p)} for p in prefixes]
