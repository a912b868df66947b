"""Small-scale transfer experiment: random init vs source pretraining vs source pretraining + SSL.

Each arm fine-tunes the same architecture on the same labeled target split
and is scored by test mIoU. The source domain has three phases and a fine
stripe texture; the target domain has two phases with closer intensities,
heavier noise and a coarser stripe, and SSL sees only unlabeled target images.
"""
from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Mapping

from .augment import AugmentConfig
from .data import SyntheticSpec, crop, generate_synthetic, patchify
from .encoder import EncoderConfig, init_params
from .segment import DecoderConfig
from .ssl import HeadConfig
from .tensor import Tensor
from .train import LabeledSet, TrainConfig, pretrain_source, run_finetune, run_ssl

log = logging.getLogger(__name__)

ARMS = ("random", "source", "ssl")


@dataclass
class TransferConfig:
    image_size: int = 64
    labeled_train: int = 40
    labeled_test: int = 10
    unlabeled: int = 400
    source_images: int = 100
    source_patch: int = 32
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        stage_count=3, base_channels=8, blocks_per_stage=1, group_norm=4))
    head: HeadConfig = field(default_factory=lambda: HeadConfig(hidden_norm="batch"))
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(view_size=32))
    source_epochs: int = 10
    ssl_epochs: int = 10
    ssl_lr: float = 0.03
    ssl_batch: int = 64
    finetune_epochs: int = 30
    finetune_lr: float = 1e-4
    finetune_batch: int = 8

    def source_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(seed=1000 + seed, grain_count=10, phase_count=3, noise_std=6.0, stripe_phase=2,
                             stripe_period=4, stripe_contrast=60.0, intensities=(60.0, 120.0, 100.0))

    def target_spec(self, seed: int) -> SyntheticSpec:
        return SyntheticSpec(seed=2000 + seed, grain_count=12, phase_count=2, noise_std=20.0, stripe_phase=1,
                             stripe_period=8, stripe_contrast=50.0, intensities=(120.0, 100.0))


@dataclass
class TransferResult:
    per_seed: dict[int, dict[str, float]]
    seconds: float

    def median(self, arm: str) -> float:
        return statistics.median(r[arm] for r in self.per_seed.values())

    @property
    def medians(self) -> dict[str, float]:
        return {arm: self.median(arm) for arm in ARMS}

    def ordered(self, total_gap: float = 0.02) -> bool:
        m = self.medians
        return m["ssl"] >= m["source"] >= m["random"] and m["ssl"] - m["random"] >= total_gap


def _clone(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}


def run_seed(cfg: TransferConfig, seed: int) -> dict[str, float]:
    """Test mIoU of the three arms; all arms share the initial weights and fine-tuning schedule."""
    enc = cfg.encoder
    size = cfg.image_size
    source = [crop(im, w) for im in generate_synthetic(cfg.source_spec(seed), size, size, cfg.source_images)
              for w in patchify(im, cfg.source_patch, 0.0)]
    labeled = generate_synthetic(cfg.target_spec(seed), size, size, cfg.labeled_train + cfg.labeled_test)
    unlabeled = generate_synthetic(cfg.target_spec(seed), size, size, cfg.unlabeled, start=1000)
    train = LabeledSet.from_records(labeled[:cfg.labeled_train])
    test = LabeledSet.from_records(labeled[cfg.labeled_train:])
    dec = DecoderConfig(2)
    ft = TrainConfig.finetune(epochs=cfg.finetune_epochs, batch_size=cfg.finetune_batch, lr=cfg.finetune_lr,
                              seed=seed)

    def finetune(encoder):
        return run_finetune(ft, train, _clone(encoder), enc, dec, test=test, aug=cfg.augment).extra["test"]["miou"]

    initial = init_params(enc, seed)
    scores = {"random": finetune(initial)}

    pretrained = _clone(initial)
    pretrain_source(TrainConfig.source_pretrain(epochs=cfg.source_epochs, batch_size=32, seed=seed), source,
                    pretrained, enc, 3, cfg.augment)
    scores["source"] = finetune(pretrained)

    adapted = _clone(pretrained)
    run_ssl(TrainConfig.ssl(epochs=cfg.ssl_epochs, batch_size=cfg.ssl_batch, lr=cfg.ssl_lr, seed=seed),
            unlabeled, adapted, enc, cfg.augment, cfg.head)
    scores["ssl"] = finetune(adapted)
    log.info("seed %d: %s", seed, scores)
    return scores


def run_transfer(cfg: TransferConfig | None = None) -> TransferResult:
    cfg = cfg or TransferConfig()
    start = time.perf_counter()
    per_seed = {s: run_seed(cfg, s) for s in cfg.seeds}
    return TransferResult(per_seed, time.perf_counter() - start)
