"""Run configuration: one JSON document covering every pipeline stage.

Every field has a default; unknown keys are rejected with their full path.
Flat dotted overrides ("distill.lr=0.001") take precedence over the file.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import gridio
from .finetune import AdaptConfig
from .models import ModelConfig
from .synthdata import GenParams
from .training import DistillConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    gen: GenParams = field(default_factory=GenParams)
    band_width: int = 49
    coverage_floor: float = 0.05
    max_retries: int = 20
    swath_train: int = 32
    swath_val: int = 8
    swath_test: int = 16
    disc_train: int = 16
    disc_val: int = 4
    disc_test: int = 8

    def swath_sizes(self) -> dict[str, int]:
        return {"train": self.swath_train, "val": self.swath_val, "test": self.swath_test}

    def disc_sizes(self) -> dict[str, int]:
        return {"train": self.disc_train, "val": self.disc_val, "test": self.disc_test}


@dataclass
class EvalConfig:
    rain_threshold: float = 0.1
    neighbor_kernels: tuple[int, ...] = (4, 8)
    noise_additive_sigma: float = 1.0
    noise_multiplicative_sigma: float = 0.003
    render_maps: bool = True


@dataclass
class RunConfig:
    run_id: str = "run"
    seed: int = 0
    out_dir: str = "runs"
    deterministic: bool = True
    tasks: tuple[str, ...] = ("classification", "regression")
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.data.gen.validate()
        self.model.validate()
        self.distill.validate()
        self.adapt.validate()
        for t in self.tasks:
            if t not in ("classification", "regression"):
                raise ConfigError(f"unknown task: {t!r}")
        if not 0 < self.data.band_width <= self.data.gen.grid_size:
            raise ConfigError("band_width must be in (0, grid_size]")

    def to_dict(self) -> dict:
        def convert(obj):
            if dataclasses.is_dataclass(obj):
                return {f.name: convert(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
            if isinstance(obj, (list, tuple)):
                return [convert(v) for v in obj]
            return obj

        return convert(self)

    def digest(self) -> str:
        return gridio.sha256_hex(gridio.canonical_json(self.to_dict()).encode())


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            where = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {where}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        ftype = hints[f.name]
        sub = f"{path}.{f.name}" if path else f.name
        if dataclasses.is_dataclass(ftype):
            kwargs[f.name] = _build(ftype, value, sub)
        elif typing.get_origin(ftype) is tuple:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub} must be a list")
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def _apply_override(data: dict, spec: str) -> None:
    if "=" not in spec:
        raise ConfigError(f"override must look like key.path=value: {spec!r}")
    key, _, raw = spec.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = data
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override through non-object key: {key}")
    node[parts[-1]] = value


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    data: dict = {}
    if path is not None:
        data = json.loads(Path(path).read_text())
    for spec in overrides or []:
        _apply_override(data, spec)
    return config_from_dict(data)


def paper_scale_overrides() -> dict:
    """The publication-scale preset: a reference point, not a test target."""
    return {
        "model": {"stages": 4, "base_channels": 64},
        "distill": {"lr": 1e-6, "lr_decay_every": 30, "batch_size": 32, "epochs": 200},
        "adapt": {"lr": 1e-6, "lr_decay_every": 30, "batch_size": 32, "epochs": 100},
    }
