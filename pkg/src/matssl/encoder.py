"""Staged residual convolutional encoder with per-stage feature taps.

Stage ``i`` is a stride-2 3x3 conv (+ReLU) to ``base_channels * 2**i``
channels followed by ``blocks_per_stage`` residual blocks
(conv3x3 -> ReLU -> conv3x3, identity skip, ReLU). There is no batch
normalization, so items in a batch never interact. ``group_norm > 0``
inserts a per-item group normalization after every conv.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, CheckpointError
from .tensor import ShapeError, Tensor

PREFIX = "encoder."


@dataclass
class EncoderConfig:
    stage_count: int = 4
    base_channels: int = 16
    blocks_per_stage: int = 2
    input_channels: int = 3
    tap_stages: tuple[int, ...] | None = None  # None taps every stage
    group_norm: int = 0  # groups per normalization layer; 0 disables

    def __post_init__(self):
        if self.stage_count < 2:
            raise ValueError(f"stage_count must be >= 2, got {self.stage_count}")
        if self.base_channels < 1 or self.blocks_per_stage < 0:
            raise ValueError("base_channels must be >= 1 and blocks_per_stage >= 0")
        if self.group_norm < 0 or (self.group_norm and self.base_channels % self.group_norm):
            raise ValueError(f"group_norm must be 0 or divide base_channels={self.base_channels}, "
                             f"got {self.group_norm}")
        if self.tap_stages is not None:
            self.tap_stages = tuple(int(s) for s in self.tap_stages)
            if not self.tap_stages or any(not 0 <= s < self.stage_count for s in self.tap_stages):
                raise ValueError(f"tap_stages must be a nonempty subset of range({self.stage_count})")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    @property
    def taps(self) -> tuple[int, ...]:
        return tuple(range(self.stage_count)) if self.tap_stages is None else self.tap_stages

    @property
    def tapped_channels(self) -> list[int]:
        return [self.channels(i) for i in self.taps]


@dataclass
class StageFeatureSet:
    maps: list[Tensor]
    gap_vectors: list[Tensor]


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    cin = config.input_channels
    for i in range(config.stage_count):
        c = config.channels(i)
        shapes[f"{PREFIX}stage{i}.down.weight"] = (c, cin, 3, 3)
        shapes[f"{PREFIX}stage{i}.down.bias"] = (c,)
        convs = [f"{PREFIX}stage{i}.down"]
        for j in range(config.blocks_per_stage):
            for k in (1, 2):
                shapes[f"{PREFIX}stage{i}.block{j}.conv{k}.weight"] = (c, c, 3, 3)
                shapes[f"{PREFIX}stage{i}.block{j}.conv{k}.bias"] = (c,)
                convs.append(f"{PREFIX}stage{i}.block{j}.conv{k}")
        if config.group_norm:
            for name in convs:
                shapes[name + ".norm.gamma"] = (c,)
                shapes[name + ".norm.beta"] = (c,)
        cin = c
    return shapes


def random_params(shapes: Mapping[str, tuple[int, ...]], rng: np.random.Generator) -> dict[str, Tensor]:
    """Kaiming-uniform (fan-in) weights, zero biases and norm shifts, unit norm scales.

    Only weights consume draws, in name order.
    """
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".gamma"):
            arr = np.ones(shape, np.float32)
        elif name.endswith((".bias", ".beta")):
            arr = np.zeros(shape, np.float32)
        else:
            arr = kaiming_uniform(rng, shape, int(np.prod(shape[1:])) if len(shape) == 4 else shape[0])
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def check_against(shapes: Mapping[str, tuple[int, ...]], stored: Mapping[str, np.ndarray]) -> None:
    for name, shape in shapes.items():
        if name not in stored:
            raise CheckpointError(f"parameter {name!r} missing from checkpoint")
        if tuple(stored[name].shape) != shape:
            raise CheckpointError(f"parameter {name!r} has shape {tuple(stored[name].shape)}, "
                                  f"config expects {shape}")
    for name in stored:
        if name not in shapes:
            raise CheckpointError(f"parameter {name!r} in checkpoint is not part of this config")


def init_params(config: EncoderConfig, seed: int = 0, source: str = "random",
                checkpoint: Checkpoint | str | os.PathLike | None = None) -> dict[str, Tensor]:
    shapes = param_shapes(config)
    if source == "random":
        return random_params(shapes, np.random.default_rng([seed, 0x454E43]))
    if source != "checkpoint":
        raise ValueError(f"unknown init source {source!r}")
    if checkpoint is None:
        raise ValueError("checkpoint source needs a checkpoint")
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)
    stored = ckpt.subset(PREFIX)
    check_against(shapes, stored)
    return {n: Tensor(stored[n].copy(), requires_grad=True, name=n) for n in shapes}


def _conv(x: Tensor, params: Mapping[str, Tensor], name: str, stride: int = 1, groups: int = 0) -> Tensor:
    y = T.conv2d(x, params[name + ".weight"], params[name + ".bias"], stride=stride, padding=1)
    if groups:
        y = T.group_norm(y, params[name + ".norm.gamma"], params[name + ".norm.beta"], groups)
    return y


def residual_block(x: Tensor, params: Mapping[str, Tensor], name: str, groups: int = 0) -> Tensor:
    h = T.relu(_conv(x, params, name + ".conv1", groups=groups))
    h = _conv(h, params, name + ".conv2", groups=groups)
    return T.relu(T.add(x, h))


def encode(batch: Tensor, params: Mapping[str, Tensor], config: EncoderConfig) -> StageFeatureSet:
    if batch.data.ndim != 4 or batch.shape[1] != config.input_channels:
        raise ShapeError(f"encode expects [N,{config.input_channels},P,P], got {batch.shape}")
    factor = 2 ** config.stage_count
    _, _, h, w = batch.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial size {h}x{w} is not divisible by 2^{config.stage_count} = {factor}")
    maps, gaps = [], []
    x = batch
    for i in range(config.stage_count):
        x = T.relu(_conv(x, params, f"{PREFIX}stage{i}.down", stride=2, groups=config.group_norm))
        for j in range(config.blocks_per_stage):
            x = residual_block(x, params, f"{PREFIX}stage{i}.block{j}", config.group_norm)
        maps.append(x)
        gaps.append(T.global_average_pool(x))
    return StageFeatureSet(maps, gaps)


def count_params(params: Mapping[str, Tensor]) -> int:
    return sum(p.size for p in params.values())
