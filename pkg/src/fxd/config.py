"""Run configuration: defaults, TOML/JSON files and command-line overrides.

Precedence is flag > file > default. Unknown keys are rejected.

File layout (every section optional)::

    [train]      # TrainConfig fields
    [loss]       # LossWeights fields
    [densify]    # DensifyConfig fields
    [scene]      # SceneSpec fields
    [lidar]      # LidarSpec fields
    [paths]      # dataset, out, scene
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .losses import LossWeights
from .synth import LidarSpec, SceneSpec
from .trainer import DensifyConfig, TrainConfig

PATH_KEYS = ("dataset", "out", "scene")


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "scene": self.scene.to_dict(), "paths": dict(self.paths)}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def read_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _merge(obj, values: dict, where: str):
    allowed = _field_names(type(obj))
    for key, val in values.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {where}.{key}")
        setattr(obj, key, val)


def build(data: dict | None = None, overrides: dict | None = None) -> Config:
    """Resolve defaults, then ``data`` (parsed file), then ``overrides`` (same nested shape)."""
    cfg = Config()
    sections = {"train", "loss", "densify", "scene", "lidar", "paths"}
    for layer in (data or {}, overrides or {}):
        extra = set(layer) - sections
        if extra:
            raise ConfigError(f"unknown section(s) {sorted(extra)}")
        layer = copy.deepcopy(layer)
        _merge(cfg.train, layer.get("train", {}), "train")
        _merge(cfg.train.loss, layer.get("loss", {}), "loss")
        _merge(cfg.train.densify, layer.get("densify", {}), "densify")
        _merge(cfg.scene, layer.get("scene", {}), "scene")
        _merge(cfg.scene.lidar, layer.get("lidar", {}), "lidar")
        for key, val in layer.get("paths", {}).items():
            if key not in PATH_KEYS:
                raise ConfigError(f"unknown key paths.{key}")
            cfg.paths[key] = val
    try:
        cfg.train.loss = LossWeights(**dataclasses.asdict(cfg.train.loss))
        cfg.train.densify = DensifyConfig(**dataclasses.asdict(cfg.train.densify))
        cfg.train.__post_init__()
        cfg.scene.lidar = LidarSpec(**dataclasses.asdict(cfg.scene.lidar))
        cfg.scene.__post_init__()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def load(path=None, overrides: dict | None = None) -> Config:
    return build(read_file(path) if path else None, overrides)


def defaults_text() -> str:
    """Every default, one ``section.key = value`` per line (for --help)."""
    cfg = Config()
    lines = []
    for section, obj in (("train", cfg.train), ("loss", cfg.train.loss), ("densify", cfg.train.densify),
                         ("scene", cfg.scene), ("lidar", cfg.scene.lidar)):
        for f in dataclasses.fields(obj):
            val = getattr(obj, f.name)
            if dataclasses.is_dataclass(val):
                continue
            lines.append(f"  {section}.{f.name} = {val!r}")
    return "\n".join(lines)
