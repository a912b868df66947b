"""Run configuration files: TOML with one table per section, strict keys, resolved write-back."""
from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .augment import AugmentConfig
from .encoder import EncoderConfig
from .segment import ABSENT_RULES, DecoderConfig
from .ssl import HeadConfig
from .train import PHASES, TrainConfig

MIOU_CONVENTIONS = ("pooled", "per_image")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending dotted key when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass
class DataConfig:
    image_dir: str = ""
    manifest: str = ""
    source_classes: int = 0  # 0 infers the class count from the masks


@dataclass
class InitConfig:
    encoder: str = "random"  # "random" or a checkpoint path


@dataclass
class OutputConfig:
    dir: str = "run"


@dataclass
class MetadataConfig:
    miou_convention: str = "pooled"
    absent_class_rule: str = "exclude"
    gate_variant: str = "scalar"
    schedule_granularity: str = "epoch"

    def __post_init__(self):
        if self.miou_convention not in MIOU_CONVENTIONS:
            raise ValueError(f"miou_convention must be one of {MIOU_CONVENTIONS}, got {self.miou_convention!r}")
        if self.absent_class_rule not in ABSENT_RULES:
            raise ValueError(f"absent_class_rule must be one of {ABSENT_RULES}, got {self.absent_class_rule!r}")


SECTIONS: dict[str, type] = {
    "train": TrainConfig,
    "augment": AugmentConfig,
    "encoder": EncoderConfig,
    "head": HeadConfig,
    "decoder": DecoderConfig,
    "data": DataConfig,
    "init": InitConfig,
    "output": OutputConfig,
    "metadata": MetadataConfig,
}

# metadata keys that mirror a field of another section
_MIRRORS = {"gate_variant": ("head", "gate_variant"), "schedule_granularity": ("train", "schedule_granularity")}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig.ssl)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    data: DataConfig = field(default_factory=DataConfig)
    init: InitConfig = field(default_factory=InitConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    metadata: MetadataConfig = field(default_factory=MetadataConfig)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], phase: str = "ssl") -> "RunConfig":
        if phase not in PHASES:
            raise ConfigError(f"unknown phase {phase!r}")
        for name in raw:
            if name not in SECTIONS:
                raise ConfigError(f"unknown section (expected one of {', '.join(SECTIONS)})", name)
        for k, v in raw.items():
            if not isinstance(v, Mapping):
                raise ConfigError("section must be a table", k)
        raw = {k: dict(v) for k, v in raw.items()}

        meta = raw.setdefault("metadata", {})
        for key, (section, fname) in _MIRRORS.items():
            sec = raw.setdefault(section, {})
            if key in meta and fname in sec and meta[key] != sec[fname]:
                raise ConfigError(f"conflicts with {section}.{fname}={sec[fname]!r}", f"metadata.{key}")
            if key in meta:
                sec[fname] = meta[key]

        train_raw = raw.get("train", {})
        if train_raw.get("phase", phase) != phase:
            raise ConfigError(f"config is for phase {train_raw['phase']!r}, command runs {phase!r}", "train.phase")
        base = {"ssl": TrainConfig.ssl, "finetune": TrainConfig.finetune,
                "source_pretrain": TrainConfig.source_pretrain}[phase]()
        built = {"train": _build(TrainConfig, "train", train_raw, dataclasses.asdict(base))}
        for name, kind in SECTIONS.items():
            if name != "train":
                built[name] = _build(kind, name, raw.get(name, {}))
        cfg = cls(**built)
        cfg.metadata.gate_variant = cfg.head.gate_variant
        cfg.metadata.schedule_granularity = cfg.train.schedule_granularity
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike, phase: str = "ssl") -> "RunConfig":
        try:
            raw = tomllib.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(raw, phase)

    def to_dict(self) -> dict[str, dict[str, Any]]:
        out = {}
        for name in SECTIONS:
            sec = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        out["encoder"]["tap_stages"] = list(self.encoder.taps)
        return out

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def encoder_init_path(self) -> Path | None:
        if self.init.encoder == "random":
            return None
        path = Path(self.init.encoder)
        if not path.is_file():
            raise ConfigError(f"checkpoint {str(path)!r} does not exist", "init.encoder")
        return path


def _build(kind: type, section: str, values: Mapping[str, Any], defaults: Mapping[str, Any] | None = None):
    fields = {f.name: f for f in dataclasses.fields(kind)}
    for key in values:
        if key not in fields:
            raise ConfigError(f"unknown key (expected one of {', '.join(fields)})", f"{section}.{key}")
    merged = {**(defaults or {}), **values}
    for key, value in merged.items():
        default = fields[key].default
        if isinstance(default, (int, float)) and not isinstance(default, bool) and isinstance(value, bool):
            raise ConfigError(f"expected a number, got {value!r}", f"{section}.{key}")
        if isinstance(default, float) and isinstance(value, int):
            merged[key] = float(value)
        elif isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"expected true or false, got {value!r}", f"{section}.{key}")
        elif isinstance(default, int) and not isinstance(default, bool) and not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", f"{section}.{key}")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", f"{section}.{key}")
        elif isinstance(default, tuple) and not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected an array, got {value!r}", f"{section}.{key}")
    try:
        return kind(**merged)
    except (TypeError, ValueError) as exc:
        key = next((k for k in values if k in str(exc)), None)
        raise ConfigError(str(exc), f"{section}.{key}" if key else section) from None
