"""Run configuration: nested dataclasses <-> YAML.

Every tunable of the pipeline lives in :class:`RunConfig`. ``print-config``
dumps the defaults; a user file only needs the keys it overrides, e.g.::

    dataset:
      kind: tum
      path: data/rgbd_dataset_freiburg1_desk
      camera: fr1
      downscale: 4
    tracker:
      iterations: 60
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .losses import LossWeights
from .mapper import DensifyThresholds, MapperConfig
from .renderer import RenderSettings
from .synthetic import SceneSpec, TrajectorySpec
from .tracker import TrackerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"          # "synthetic" or "tum"
    path: str | None = None
    camera: str = "fr1"              # fr1/fr2/fr3 or "fx,fy,cx,cy,width,height"
    downscale: int = 1
    max_frames: int | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "tum"):
            raise ConfigError(f"dataset.kind must be 'synthetic' or 'tum', got {self.kind!r}")
        if self.downscale < 1:
            raise ConfigError("dataset.downscale must be >= 1")
        if self.max_frames is not None and self.max_frames < 1:
            raise ConfigError("dataset.max_frames must be >= 1")


@dataclass(frozen=True)
class SyntheticConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    seed: int = 0
    mapper: MapperConfig = field(default_factory=MapperConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    render: RenderSettings = field(default_factory=RenderSettings)
    output: str | None = None
    checkpoint_every: int = 10
    dump_every: int = 0

    def __post_init__(self):
        if self.mapper.iterations < 0 or self.tracker.iterations < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.checkpoint_every < 0 or self.dump_every < 0:
            raise ConfigError("checkpoint_every and dump_every must be non-negative")

    def to_dict(self):
        return dataclasses.asdict(self)

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, f"{where}.{name}")
        elif tp is tuple or typing.get_origin(tp) is tuple:
            kwargs[name] = tuple(value)
        elif tp is float and isinstance(value, int):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data):
    return _build(RunConfig, data or {}, "config")


def load_config(path):
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(data)


__all__ = [
    "ConfigError", "DatasetConfig", "SyntheticConfig", "RunConfig", "LossWeights",
    "DensifyThresholds", "MapperConfig", "TrackerConfig", "RenderSettings",
    "SceneSpec", "TrajectorySpec", "config_from_dict", "load_config",
]
