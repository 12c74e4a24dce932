"""Experiment configuration with strict JSON round-tripping."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import HyperParams
from .models import EncoderConfig
from .strategies import StrategyConfig


@dataclass
class DataConfig:
    n_categories: int = 10
    instances_per_category: int = 4
    views_per_instance: int = 24
    image_size: int = 32
    gallery_fraction: float = 0.25


@dataclass
class StrategySection:
    method: str = "finetune"
    supervision: str = "self"
    memory_fraction: float = 0.10


@dataclass
class ProtocolConfig:
    n_tasks: int = 5
    categories_per_task: int = 2
    instance_subtasks: int = 1
    k_nn: int = 5
    neighbor_queries: int = 3


@dataclass
class ExperimentConfig:
    dataset: str = "synthA"
    cross_dataset: str | None = None
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    strategy: StrategySection = field(default_factory=StrategySection)
    hyper: HyperParams = field(default_factory=HyperParams)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    output_dir: str = "runs/default"
    save_checkpoints: bool = True

    def __post_init__(self):
        self.strategy_config()  # validates method / supervision / fraction
        if self.data.image_size != self.encoder.input_shape[1]:
            self.encoder.input_shape = (self.encoder.input_shape[0],
                                        self.data.image_size, self.data.image_size)
            self.encoder.__post_init__()

    def strategy_config(self) -> StrategyConfig:
        return StrategyConfig(self.strategy.method, self.strategy.supervision,
                              self.strategy.memory_fraction, self.hyper)

    @property
    def tag(self) -> str:
        return f"{self.strategy.method}-{self.strategy.supervision}"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder"]["input_shape"] = list(d["encoder"]["input_shape"])
        d["encoder"]["hidden"] = list(d["encoder"]["hidden"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def full_scale(cls, **overrides) -> "ExperimentConfig":
        """Epoch count, batch size and k of the original protocol."""
        cfg = cls(**overrides)
        cfg.hyper.epochs_per_session = 200
        cfg.hyper.batch_size = 256
        cfg.protocol.k_nn = 100
        return cfg


_NESTED = {
    "data": DataConfig,
    "encoder": EncoderConfig,
    "strategy": StrategySection,
    "hyper": HyperParams,
    "protocol": ProtocolConfig,
}


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object, got {type(d).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in d.items():
        sub = _NESTED.get(key) if cls is ExperimentConfig else None
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{where}.{key}")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def write_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(cfg.to_json() + "\n")
    return path
