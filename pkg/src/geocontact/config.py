"""Run configuration, stored as a YAML key-value file.

Example (every key optional; shown values are the defaults)::

    seed: 0
    model:
      latent_dim: 32          # l
      n_points: 4096          # points per cloud
      encoder_widths: [64, 64, 64, 128, 1024]
      decoder_widths: [256, 512]
      decoder_output_scale: 0.01   # metres per decoder output unit
      n_models: 10            # N Gaussian local models
      head_hidden: 128
      head_blocks: 3
      amplitude_scale: [1.0, 10.0, 100.0, null]   # a0 a1 a2 b0; null = from data
      parameter_floor: 1.0e-6
    stage1: {epochs: 500, batch: 10, lr: 1.0e-4, beta: 1.0e-3}
    stage2: {epochs: 100, batch: 10, lr: 2.0e-4}
    data: {T: 512, tail_fraction: 0.1, oversample: 10, alpha: 8.0}
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml


@dataclass
class ModelConfig:
    latent_dim: int = 32
    n_points: int = 4096
    encoder_widths: list[int] = field(default_factory=lambda: [64, 64, 64, 128, 1024])
    decoder_widths: list[int] = field(default_factory=lambda: [256, 512])
    decoder_output_scale: float = 0.01
    n_models: int = 10
    head_hidden: int = 128
    head_blocks: int = 3
    amplitude_scale: list[float | None] = field(default_factory=lambda: [1.0, 10.0, 100.0, None])
    parameter_floor: float = 1e-6


@dataclass
class Stage1Config:
    epochs: int = 500
    batch: int = 10
    lr: float = 1e-4
    beta: float = 1e-3


@dataclass
class Stage2Config:
    epochs: int = 100
    batch: int = 10
    lr: float = 2e-4


@dataclass
class DataConfig:
    T: int = 512
    tail_fraction: float = 0.1
    oversample: int = 10
    alpha: float = 8.0


@dataclass
class TrainConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        counts = [self.model.latent_dim, self.model.n_points, self.model.n_models,
                  self.stage1.epochs, self.stage1.batch, self.stage2.epochs, self.stage2.batch,
                  self.data.T]
        if any(int(c) < 1 for c in counts):
            raise ValueError("all counts in the configuration must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "TrainConfig":
        return _build(cls, doc or {})

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text(encoding="utf-8")))


def _build(cls, doc: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = known[name].default_factory() if callable(known[name].default_factory) \
            else known[name].default
        kwargs[name] = _build(type(default), value) if is_dataclass(default) else value
    return cls(**kwargs)
