"""Optimizers, learning-rate schedules and the three training phases.

Phases: supervised source pretraining (stand-in for natural-image
pretraining), contrastive SSL adaptation, and segmentation fine-tuning.
All randomness is drawn from generators keyed by (seed, epoch, batch, item),
so a run is a pure function of its inputs.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, finetune_augment, make_view_pair, normalize, to_chw
from .checkpoint import Checkpoint
from .data import ImageRecord, dominant_phase
from .encoder import EncoderConfig, encode, random_params
from .segment import (DecoderConfig, MaskBatch, dice_loss, init_decoder, miou, predict,
                      segment_forward)
from .ssl import ContrastiveConfig, HeadConfig, gate_tensors, init_head, ssl_forward
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)

PHASES = ("source_pretrain", "ssl", "finetune")


class TrainingAborted(RuntimeError):
    def __init__(self, phase: str, epoch: int, batch: int, loss: float | None, reason: str = ""):
        msg = f"{phase} aborted at epoch {epoch}, batch {batch}: loss={loss}"
        super().__init__(msg + (f" ({reason})" if reason else ""))
        self.phase, self.epoch, self.batch, self.loss = phase, epoch, batch, loss


@dataclass
class TrainConfig:
    phase: str = "ssl"
    epochs: int = 50
    batch_size: int = 128
    optimizer: str = "sgd"  # sgd | adam
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"  # cosine | constant
    lr_min: float = 1e-4
    schedule_granularity: str = "epoch"  # epoch | iteration
    temperature: float = 0.07
    seed: int = 0
    eval_every: int = 1
    freeze_encoder: bool = False

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.schedule_granularity not in ("epoch", "iteration"):
            raise ValueError("schedule_granularity must be 'epoch' or 'iteration'")
        if not self.lr > 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < (2 if self.phase == "ssl" else 1):
            raise ValueError(f"batch_size {self.batch_size} too small for phase {self.phase}")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")

    @classmethod
    def ssl(cls, **kw) -> "TrainConfig":
        return cls(**{**dict(phase="ssl", epochs=50, batch_size=128, optimizer="sgd", lr=0.1, momentum=0.9,
                             weight_decay=1e-6, schedule="cosine", lr_min=1e-4, temperature=0.07, seed=0), **kw})

    @classmethod
    def finetune(cls, **kw) -> "TrainConfig":
        return cls(**{**dict(phase="finetune", epochs=200, batch_size=128, optimizer="adam", lr=1e-4,
                             weight_decay=1e-5, schedule="constant", seed=0), **kw})

    @classmethod
    def source_pretrain(cls, **kw) -> "TrainConfig":
        return cls(**{**dict(phase="source_pretrain", epochs=20, batch_size=32, optimizer="adam", lr=1e-3,
                             weight_decay=0.0, schedule="constant", seed=0), **kw})


# ---------------------------------------------------------------------------
# optimizers and schedule


def sgd_step(params: Sequence[Tensor], state: dict, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0) -> None:
    """Heavy-ball SGD: ``v = momentum*v + (g + wd*p); p -= lr*v``. Tensors without grad are skipped."""
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64) + weight_decay * p.data
        v = state.get(i)
        v = g if v is None else momentum * v + g
        state[i] = v
        p.data[...] = p.data - lr * v


def adam_step(params: Sequence[Tensor], state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam with weight decay added to the gradient."""
    t = state["t"] = state.get("t", 0) + 1
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64) + weight_decay * p.data
        m, v = state.get(("m", i)), state.get(("v", i))
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state[("m", i)], state[("v", i)] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p.data[...] = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(t: float, total: float, lr_max: float, lr_min: float) -> float:
    if total <= 0 or t <= 0:
        return lr_max
    if t >= total:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / total))


class Optimizer:
    """Binds a parameter list, a TrainConfig and the lr schedule."""

    def __init__(self, params: Sequence[Tensor], cfg: TrainConfig, steps_per_epoch: int):
        self.params = list(params)
        self.cfg = cfg
        self.state: dict = {}
        self.steps_per_epoch = max(1, steps_per_epoch)

    def lr_at(self, epoch: int, step: int = 0) -> float:
        c = self.cfg
        if c.schedule == "constant":
            return c.lr
        if c.schedule_granularity == "epoch":
            return cosine_lr(epoch, c.epochs - 1, c.lr, c.lr_min)
        total = c.epochs * self.steps_per_epoch - 1
        return cosine_lr(epoch * self.steps_per_epoch + step, total, c.lr, c.lr_min)

    def step(self, lr: float) -> None:
        c = self.cfg
        if c.optimizer == "sgd":
            sgd_step(self.params, self.state, lr, c.momentum, c.weight_decay)
        else:
            adam_step(self.params, self.state, lr, c.beta1, c.beta2, c.eps, c.weight_decay)


def _batches(n: int, size: int, seed: int, epoch: int, drop_last: bool) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, 0x5348]).permutation(n)
    stop = n - n % size if drop_last else n
    return [order[i:i + size] for i in range(0, stop, size)]


def _check_loss(loss: Tensor, phase: str, epoch: int, batch: int) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingAborted(phase, epoch, batch, value, "non-finite loss")
    return value


def _guarded(fn, phase: str, epoch: int, batch: int):
    try:
        return fn()
    except NonFiniteError as exc:
        raise TrainingAborted(phase, epoch, batch, None, str(exc)) from exc


# ---------------------------------------------------------------------------
# metrics CSV


def metrics_header(gate_count: int) -> list[str]:
    return ["epoch", "phase", "loss", "lr", "miou"] + [f"gate_{i}" for i in range(gate_count)]


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: Sequence[Mapping], gate_count: int) -> str:
    header = metrics_header(gate_count)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in header])
    return buf.getvalue()


@dataclass
class RunResult:
    params: dict[str, Tensor]
    rows: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    gate_count: int = 0

    def csv(self) -> str:
        return metrics_csv(self.rows, self.gate_count)


# ---------------------------------------------------------------------------
# source pretraining


def source_classifier(enc_cfg: EncoderConfig, num_classes: int, seed: int) -> dict[str, Tensor]:
    c = enc_cfg.channels(enc_cfg.stage_count - 1)
    shapes = {"classifier.weight": (c, num_classes), "classifier.bias": (num_classes,)}
    return random_params(shapes, np.random.default_rng([seed, 0x434C53]))


def pretrain_source(cfg: TrainConfig, images: Sequence[ImageRecord], encoder: dict[str, Tensor],
                    enc_cfg: EncoderConfig, num_classes: int, aug: AugmentConfig | None = None) -> RunResult:
    """Train encoder + linear classifier on GAP of the last stage; labels are each patch's dominant phase."""
    aug = aug or AugmentConfig()
    if not images:
        raise ValueError("source pretraining needs at least one labeled patch")
    x_all = np.stack([to_chw(im) for im in images])
    labels = np.array([dominant_phase(im.mask) for im in images])
    head = source_classifier(enc_cfg, num_classes, cfg.seed)
    params = list(encoder.values()) + list(head.values())
    size = min(cfg.batch_size, len(images))
    opt = Optimizer(params, cfg, math.ceil(len(images) / size))
    rows = []
    for epoch in range(cfg.epochs):
        losses, correct = [], 0
        for b, idx in enumerate(_batches(len(images), size, cfg.seed, epoch, drop_last=False)):
            rng = np.random.default_rng([cfg.seed, epoch, b, 0x5352])
            xb = np.stack([normalize(_random_flips(x_all[i], rng), aug.normalize_mean, aug.normalize_std)
                           for i in idx]).astype(np.float32)

            def step():
                feats = encode(Tensor(xb), encoder, enc_cfg)
                logits = T.linear(feats.gap_vectors[-1], head["classifier.weight"], head["classifier.bias"])
                return logits, T.cross_entropy(logits, labels[idx])

            logits, loss = _guarded(step, cfg.phase, epoch + 1, b)
            losses.append(_check_loss(loss, cfg.phase, epoch + 1, b))
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
            T.zero_grad(params)
            loss.backward()
            opt.step(opt.lr_at(epoch, b))
        rows.append({"epoch": epoch + 1, "phase": cfg.phase, "loss": float(np.mean(losses)),
                     "lr": opt.lr_at(epoch), "accuracy": correct / len(images)})
        log.info("source epoch %d loss %.4f acc %.3f", epoch + 1, rows[-1]["loss"], rows[-1]["accuracy"])
    T.zero_grad(params)
    return RunResult(encoder, rows, {"classifier": head})  # classifier stays out of params


def _random_flips(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        img = img[:, :, ::-1]
    if rng.random() < 0.5:
        img = img[:, ::-1, :]
    return img


# ---------------------------------------------------------------------------
# SSL adaptation


def run_ssl(cfg: TrainConfig, patches: Sequence[ImageRecord], encoder: dict[str, Tensor], enc_cfg: EncoderConfig,
            aug: AugmentConfig | None = None, head_cfg: HeadConfig | None = None,
            head: dict[str, Tensor] | None = None) -> RunResult:
    """Contrastive adaptation of ``encoder`` (updated in place) on unlabeled patches.

    The returned result carries the fusion head under ``extra["head"]``.
    """
    aug = aug or AugmentConfig()
    head_cfg = head_cfg or HeadConfig()
    if not patches:
        raise ValueError("SSL needs a nonempty unlabeled dataset")
    head = head if head is not None else init_head(enc_cfg, head_cfg, cfg.seed)
    gates = gate_tensors(head)
    size = min(cfg.batch_size, len(patches))
    if size < 2:
        raise ValueError("SSL needs at least 2 patches per batch")
    contrast = ContrastiveConfig(cfg.temperature)
    params = list(encoder.values()) + list(head.values())
    opt = Optimizer(params, cfg, len(patches) // size)
    rows = []
    for epoch in range(cfg.epochs):
        losses = []
        for b, idx in enumerate(_batches(len(patches), size, cfg.seed, epoch, drop_last=True)):
            pairs = [make_view_pair(patches[i], aug, np.random.default_rng([cfg.seed, epoch, b, k, 0x5653]))
                     for k, i in enumerate(idx)]
            va = Tensor(np.stack([p.view_a.data for p in pairs]))
            vb = Tensor(np.stack([p.view_b.data for p in pairs]))
            loss = _guarded(lambda: ssl_forward(va, vb, encoder, head, enc_cfg, contrast), cfg.phase, epoch + 1, b)
            losses.append(_check_loss(loss, cfg.phase, epoch + 1, b))
            T.zero_grad(params)
            loss.backward()
            _guarded(lambda: opt.step(opt.lr_at(epoch, b)), cfg.phase, epoch + 1, b)
            _check_params(params, cfg.phase, epoch + 1, b)
        row = {"epoch": epoch + 1, "phase": cfg.phase, "loss": float(np.mean(losses)), "lr": opt.lr_at(epoch)}
        for i, g in enumerate(gates):
            row[f"gate_{i}"] = float(g.data.astype(np.float64).mean())
        rows.append(row)
        log.info("ssl epoch %d loss %.4f", epoch + 1, row["loss"])
    T.zero_grad(params)
    return RunResult(encoder, rows, {"head": head}, gate_count=len(gates))


def _check_params(params: Sequence[Tensor], phase: str, epoch: int, batch: int) -> None:
    for p in params:
        if not np.isfinite(p.data).all():
            raise TrainingAborted(phase, epoch, batch, None, f"parameter {p.name} became non-finite")


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class LabeledSet:
    """Normalized-ready 0..255 images ``[N,3,H,W]`` with class maps ``[N,H,W]``."""

    images: np.ndarray
    masks: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord]) -> "LabeledSet":
        if any(r.mask is None for r in records):
            raise ValueError("every labeled record needs a mask")
        return cls(np.stack([to_chw(r) for r in records]), np.stack([r.mask for r in records]))

    def __len__(self) -> int:
        return len(self.images)


class BestKeeper:
    """Keeps a copy of the parameters with the highest validation score (first wins ties)."""

    def __init__(self):
        self.score = -math.inf
        self.epoch: int | None = None
        self.params: dict[str, np.ndarray] | None = None

    def offer(self, epoch: int, score: float, params: Mapping[str, Tensor]) -> bool:
        if score > self.score:
            self.score, self.epoch = score, epoch
            self.params = {k: v.data.copy() for k, v in params.items()}
            return True
        return False


def evaluate(data: LabeledSet, encoder, decoder, enc_cfg, dec_cfg, aug: AugmentConfig,
             absent: str = "exclude") -> dict:
    x = normalize(data.images, aug.normalize_mean, aug.normalize_std).astype(np.float32)
    pred = predict(x, encoder, decoder, enc_cfg, dec_cfg)
    per_class, pooled = miou(pred, data.masks, dec_cfg.num_classes, absent)
    _, per_image = miou(pred, data.masks, dec_cfg.num_classes, absent, per_image=True)
    return {"per_class": per_class, "miou": pooled, "miou_per_image": per_image, "pred": pred}


def run_finetune(cfg: TrainConfig, train: LabeledSet, encoder: dict[str, Tensor], enc_cfg: EncoderConfig,
                 dec_cfg: DecoderConfig, val: LabeledSet | None = None, test: LabeledSet | None = None,
                 aug: AugmentConfig | None = None, miou_convention: str = "pooled", absent: str = "exclude",
                 val_metric: Callable[[int], float] | None = None) -> RunResult:
    """End-to-end Dice fine-tuning of encoder + fresh decoder.

    With a validation set the best-by-validation-mIoU parameters are kept;
    otherwise the final parameters are. ``val_metric`` overrides the
    validation score (epoch -> score), mainly for testing selection.
    """
    aug = aug or AugmentConfig()
    if len(train) == 0:
        raise ValueError("fine-tuning needs a nonempty labeled train split")
    decoder = init_decoder(enc_cfg, dec_cfg, cfg.seed)
    model = {**encoder, **decoder}
    trainable = list(decoder.values()) if cfg.freeze_encoder else list(model.values())
    size = min(cfg.batch_size, len(train))
    opt = Optimizer(trainable, cfg, math.ceil(len(train) / size))
    keeper = BestKeeper()
    score_key = "miou" if miou_convention == "pooled" else "miou_per_image"
    rows = []
    for epoch in range(cfg.epochs):
        losses = []
        for b, idx in enumerate(_batches(len(train), size, cfg.seed, epoch, drop_last=False)):
            pairs = [finetune_augment(train.images[i], train.masks[i],
                                      np.random.default_rng([cfg.seed, epoch, b, k, 0x4654]),
                                      aug.normalize_mean, aug.normalize_std) for k, i in enumerate(idx)]
            xb = Tensor(np.stack([p[0] for p in pairs]))
            truth = MaskBatch(np.stack([p[1] for p in pairs]), dec_cfg.num_classes)
            losses.append(finetune_step(xb, truth, encoder, decoder, enc_cfg, dec_cfg, opt, opt.lr_at(epoch, b),
                                        cfg.freeze_encoder, epoch + 1, b))
        row = {"epoch": epoch + 1, "phase": cfg.phase, "loss": float(np.mean(losses)), "lr": opt.lr_at(epoch)}
        if (epoch + 1) % cfg.eval_every == 0 and (val is not None or val_metric is not None):
            if val_metric is not None:
                score = float(val_metric(epoch + 1))
            else:
                score = evaluate(val, encoder, decoder, enc_cfg, dec_cfg, aug, absent)[score_key]
            row["miou"] = score
            keeper.offer(epoch + 1, score, model)
        rows.append(row)
        log.info("finetune epoch %d loss %.4f miou %s", epoch + 1, row["loss"], row.get("miou", ""))
    T.zero_grad(model.values())
    if keeper.params is not None:
        for k, arr in keeper.params.items():
            model[k].data[...] = arr
    extra = {"decoder": decoder, "best_epoch": keeper.epoch if keeper.params is not None else cfg.epochs,
             "miou_convention": miou_convention, "absent_rule": absent}
    if test is not None:
        extra["test"] = evaluate(test, encoder, decoder, enc_cfg, dec_cfg, aug, absent)
    return RunResult(model, rows, extra)


def finetune_step(batch: Tensor, truth: MaskBatch, encoder: dict[str, Tensor], decoder: dict[str, Tensor],
                  enc_cfg: EncoderConfig, dec_cfg: DecoderConfig, opt: Optimizer, lr: float,
                  freeze_encoder: bool = False, epoch: int = 0, batch_index: int = 0) -> float:
    """One forward/Dice/backward/update; returns the pre-update loss.

    With ``freeze_encoder`` the encoder gradients are zeroed before the update.
    """
    loss = _guarded(lambda: dice_loss(segment_forward(batch, encoder, decoder, enc_cfg, dec_cfg), truth),
                    "finetune", epoch, batch_index)
    value = _check_loss(loss, "finetune", epoch, batch_index)
    T.zero_grad(list(encoder.values()) + list(decoder.values()))
    loss.backward()
    if freeze_encoder:
        for p in encoder.values():
            p.grad = np.zeros_like(p.data)
    _guarded(lambda: opt.step(lr), "finetune", epoch, batch_index)
    return value


def checkpoint_of(params: Mapping[str, Tensor], config: dict, epoch: int, seed: int) -> Checkpoint:
    """Every generator is keyed by (seed, epoch, ...), so the seed and next epoch are the full rng state."""
    rng_state = {"seed": int(seed), "next_epoch": int(epoch)}
    return Checkpoint.from_tensors(params, config=config, rng_state=rng_state, epoch=epoch)


def config_dict(**sections) -> dict:
    return {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in sections.items()}
