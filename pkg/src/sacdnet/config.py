"""Run configuration: nested dataclasses backed by a YAML file plus ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .pseudochange import AugmentConfig, DatasetManifest, SourceSpec

PHASES = ("pretrain", "finetune")


@dataclass
class NormalizeConfig:
    # YOLO-family backbones take plain [0, 1] pixels
    mean: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    std: list[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])


@dataclass
class EncoderConfig:
    variant: str = "synthetic-test"
    weights_path: str | None = None
    seed: int = 7
    taps: list[int] | None = None
    adapter_channels: int = 64
    normalize: NormalizeConfig = field(default_factory=NormalizeConfig)


@dataclass
class DecoderConfig:
    base_channels: int = 64
    attention_reduction: int = 4


@dataclass
class FusionConfig:
    strategy: str = "learnable"
    init: float = 0.0


@dataclass
class TrainConfig:
    phase: str = "finetune"
    lr: float | None = None          # None: 0.1 for pretrain, 0.01 for finetune
    epochs: int | None = None        # None: 200 for pretrain, 50 for finetune
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 32
    gamma: float = 0.97
    seg_weight: float = 1.0
    seg_classes: int = 2
    samples_per_epoch: int = 9000
    crop_size: int | None = 256
    val_fraction: float = 0.1
    max_steps_per_epoch: int | None = None
    seed: int = 0

    @property
    def initial_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 0.1 if self.phase == "pretrain" else 0.01

    @property
    def num_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return 200 if self.phase == "pretrain" else 50

    def validate(self) -> None:
        if self.phase not in PHASES:
            raise ConfigError(f"train.phase must be one of {PHASES}, got '{self.phase}'")
        if self.seg_weight < 0:
            raise ConfigError("train.seg_weight must be >= 0")
        if self.initial_lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.num_epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("train.epochs and train.batch_size must be positive")


@dataclass
class PseudoConfig:
    sources: list[dict] = field(default_factory=list)
    tile_size: int = 512
    count: int = 1000

    def manifest(self, seed: int, samples_per_epoch: int) -> DatasetManifest:
        return DatasetManifest([SourceSpec(**s) for s in self.sources], self.tile_size,
                               samples_per_epoch, seed)


@dataclass
class EvalConfig:
    threshold: float = 0.5
    batch_size: int = 8


@dataclass
class Config:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def arch_hash(self) -> str:
        """Hash of everything that fixes checkpoint tensor shapes."""
        arch = {
            "variant": self.encoder.variant,
            "taps": self.encoder.taps,
            "adapter_channels": self.encoder.adapter_channels,
            "decoder": dataclasses.asdict(self.decoder),
        }
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, values: dict, prefix: str = ""):
    if not isinstance(values, dict):
        raise ConfigError(f"'{prefix.rstrip('.') or 'config'}' must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key '{prefix}{unknown[0]}'")
    kwargs = {}
    for name, value in values.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(values: dict | None) -> Config:
    return _build(Config, values or {})


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(values: dict, overrides: list[str]) -> dict:
    """Set dotted keys in a raw config dict; every key must exist in the schema."""
    defaults = Config().to_dict()
    for item in overrides:
        path, value = parse_override(item)
        node, schema = values, defaults
        for part in path[:-1]:
            if not isinstance(schema, dict) or part not in schema:
                raise ConfigError(f"unknown config key '{'.'.join(path)}'")
            schema = schema[part]
            node = node.setdefault(part, {})
        if not isinstance(schema, dict) or path[-1] not in schema:
            raise ConfigError(f"unknown config key '{'.'.join(path)}'")
        node[path[-1]] = value
    return values


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> Config:
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            values = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: invalid YAML ({exc})") from exc
    values = apply_overrides(values, overrides or [])
    return from_dict(values)
