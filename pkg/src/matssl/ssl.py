"""Gated feature fusion, projection head and the NT-Xent contrastive loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, StageFeatureSet, encode, random_params
from .tensor import NORM_EPS, ShapeError, Tensor

PREFIX = "head."


@dataclass
class HeadConfig:
    gate_variant: str = "scalar"  # scalar | vector
    gate_init: float = 1.0
    hidden: int = 256
    embed_dim: int = 128
    hidden_norm: str = "none"  # none | batch (standardize the hidden layer over the batch)

    def __post_init__(self):
        if self.hidden_norm not in ("batch", "none"):
            raise ValueError(f"hidden_norm must be 'batch' or 'none', got {self.hidden_norm!r}")
        if self.gate_variant not in ("scalar", "vector"):
            raise ValueError(f"gate_variant must be 'scalar' or 'vector', got {self.gate_variant!r}")
        if self.hidden < 1 or self.embed_dim < 1:
            raise ValueError("hidden and embed_dim must be positive")


@dataclass
class ContrastiveConfig:
    temperature: float = 0.07
    eps: float = NORM_EPS

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class EmbeddingBatch:
    """``z[2N, D]`` with ``pairing[k]`` the row index of k's positive."""

    z: Tensor
    pairing: np.ndarray | None = None

    def __post_init__(self):
        rows = self.z.shape[0]
        if self.z.data.ndim != 2 or rows % 2:
            raise ShapeError(f"embedding batch must be [2N, D], got {self.z.shape}")
        if self.pairing is None:
            self.pairing = (np.arange(rows) + rows // 2) % rows
        p = np.asarray(self.pairing)
        if p.shape != (rows,) or np.any(p == np.arange(rows)) or np.any(p[p] != np.arange(rows)):
            raise ValueError("pairing must be a fixed-point-free involution over the rows")
        self.pairing = p


def head_shapes(enc: EncoderConfig, cfg: HeadConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for i, c in zip(enc.taps, enc.tapped_channels):
        shapes[f"{PREFIX}gate{i}"] = (1,) if cfg.gate_variant == "scalar" else (c,)
    width = sum(enc.tapped_channels)
    shapes[f"{PREFIX}fc1.weight"] = (width, cfg.hidden)
    shapes[f"{PREFIX}fc1.bias"] = (cfg.hidden,)
    if cfg.hidden_norm == "batch":
        shapes[f"{PREFIX}norm.gamma"] = (cfg.hidden,)
        shapes[f"{PREFIX}norm.beta"] = (cfg.hidden,)
    shapes[f"{PREFIX}fc2.weight"] = (cfg.hidden, cfg.embed_dim)
    shapes[f"{PREFIX}fc2.bias"] = (cfg.embed_dim,)
    return shapes


def init_head(enc: EncoderConfig, cfg: HeadConfig, seed: int = 0) -> dict[str, Tensor]:
    shapes = head_shapes(enc, cfg)
    fixed = {n: (cfg.gate_init if ".gate" in n else 1.0 if n.endswith("gamma") else 0.0)
             for n in shapes if ".gate" in n or ".norm." in n}
    layers = {n: s for n, s in shapes.items() if n not in fixed}
    drawn = random_params(layers, np.random.default_rng([seed, 0x48454144]))
    return {n: drawn[n] if n in drawn else Tensor(np.full(s, fixed[n], np.float32), requires_grad=True, name=n)
            for n, s in shapes.items()}


def gate_tensors(head: Mapping[str, Tensor]) -> list[Tensor]:
    names = sorted((n for n in head if n.startswith(PREFIX + "gate")), key=lambda n: int(n[len(PREFIX) + 4:]))
    return [head[n] for n in names]


def gated_fuse(features: StageFeatureSet | Sequence[Tensor], gates: Sequence[Tensor],
               taps: Sequence[int] | None = None) -> Tensor:
    """``sigmoid(gap_i) * gate_i`` per tapped stage, concatenated in stage order."""
    gaps = features.gap_vectors if isinstance(features, StageFeatureSet) else list(features)
    if taps is not None:
        gaps = [gaps[i] for i in taps]
    if len(gaps) != len(gates):
        raise ValueError(f"{len(gaps)} tapped stages but {len(gates)} gates")
    return T.concat([T.scale_columns(T.sigmoid(f), g) for f, g in zip(gaps, gates)], axis=1)


def project(fused: Tensor, head: Mapping[str, Tensor]) -> Tensor:
    """linear -> [batch norm] -> ReLU -> linear; the norm is present iff the head has its params."""
    h = T.linear(fused, head[PREFIX + "fc1.weight"], head[PREFIX + "fc1.bias"])
    if PREFIX + "norm.gamma" in head:
        h = T.batch_norm(h, head[PREFIX + "norm.gamma"], head[PREFIX + "norm.beta"])
    h = T.relu(h)
    return T.linear(h, head[PREFIX + "fc2.weight"], head[PREFIX + "fc2.bias"])


def _ntxent_parts(batch: EmbeddingBatch, cfg: ContrastiveConfig):
    rows = batch.z.shape[0]
    if rows < 4:
        raise ShapeError(f"NT-Xent needs 2N >= 4 rows to have negatives, got {rows}")
    z64 = batch.z.data.astype(np.float64)
    norms = np.sqrt((z64 * z64).sum(axis=1))
    denom = np.maximum(norms, cfg.eps)
    u = z64 / denom[:, None]
    logits = u @ u.T / cfg.temperature
    np.fill_diagonal(logits, -np.inf)
    top = logits.max(axis=1, keepdims=True)
    expd = np.exp(logits - top)
    per_anchor = top[:, 0] + np.log(expd.sum(axis=1)) - logits[np.arange(rows), batch.pairing]
    return per_anchor, u, norms, denom, expd


def anchor_losses(batch: EmbeddingBatch | Tensor, cfg: ContrastiveConfig | None = None) -> np.ndarray:
    """Per-anchor NT-Xent terms (float64, not recorded on the tape)."""
    batch = batch if isinstance(batch, EmbeddingBatch) else EmbeddingBatch(batch)
    return _ntxent_parts(batch, cfg or ContrastiveConfig())[0]


def ntxent_loss(batch: EmbeddingBatch | Tensor, cfg: ContrastiveConfig | None = None) -> Tensor:
    """Mean over all 2N anchors of -log softmax(sim/tau)[positive], self excluded."""
    cfg = cfg or ContrastiveConfig()
    batch = batch if isinstance(batch, EmbeddingBatch) else EmbeddingBatch(batch)
    z = batch.z
    rows = z.shape[0]
    per_anchor, u, norms, denom, expd = _ntxent_parts(batch, cfg)
    idx, pos = np.arange(rows), batch.pairing

    def backward(g):
        p = expd / expd.sum(axis=1, keepdims=True)
        p[idx, pos] -= 1.0
        p *= g / rows
        du = (p + p.T) @ u / cfg.temperature
        radial = np.where(norms > cfg.eps, (u * du).sum(axis=1), 0.0)
        dz = (du - u * radial[:, None]) / denom[:, None]
        return (dz.astype(z.data.dtype),)

    return T.record("ntxent", np.array(per_anchor.mean()), (z,), backward)


def embed(views: Tensor, encoder: Mapping[str, Tensor], head: Mapping[str, Tensor],
          enc_cfg: EncoderConfig) -> Tensor:
    feats = encode(views, encoder, enc_cfg)
    return project(gated_fuse(feats, gate_tensors(head), enc_cfg.taps), head)


def ssl_forward(view_a: Tensor, view_b: Tensor, encoder: Mapping[str, Tensor], head: Mapping[str, Tensor],
                enc_cfg: EncoderConfig, cfg: ContrastiveConfig | None = None) -> Tensor:
    """NT-Xent loss of N view pairs; rows k and k+N of the embedding batch are positives."""
    if view_a.shape != view_b.shape:
        raise ShapeError(f"view batches differ in shape: {view_a.shape} vs {view_b.shape}")
    views = T.concat([view_a, view_b], axis=0)
    return ntxent_loss(EmbeddingBatch(embed(views, encoder, head, enc_cfg)), cfg)
