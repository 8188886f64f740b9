"""Run configuration: dataclass sections, file loading and dotted overrides.

Precedence is defaults < config file (JSON or TOML) < dotted CLI overrides.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .losses import LossWeights
from .model import ModelConfig

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


@dataclass
class DataConfig:
    kinds: tuple[str, ...] = ("translating_sphere", "breathing_sphere", "two_lobe_capsule", "articulated_dumbbell")
    n_per_kind: int = 20
    n_frames: int = 8
    n_points: int = 300
    temporal_mode: str = "even"
    noise_sigma: float = 0.005
    seed: int = 0
    val_fraction: float = 0.2


@dataclass
class FusionConfig:
    mode: str = "dual_cross_attn"
    heads: int = 1


@dataclass
class TrainConfig:
    batch_size: int = 4            # 16 for full-size runs
    lr: float = 1e-4
    lr_decay_every: int = 5000
    lr_decay_factor: float = 0.5
    max_iters: int = 20000
    val_every: int = 2000
    patience: int = 10
    n_recon_queries: int = 512
    near_surface_fraction: float = 0.5
    near_surface_band: float = 0.02
    n_flow_trajectories: int = 100
    seed: int = 0
    max_grad_norm: float | None = None
    checkpoint_every: int = 1000
    log_every: int = 1

    def __post_init__(self):
        for name in ("batch_size", "max_iters", "val_every", "patience", "n_recon_queries",
                     "n_flow_trajectories"):
            if getattr(self, name) <= 0:
                raise ValueError(f"train.{name} must be positive")
        if not self.lr > 0:
            raise ValueError("train.lr must be positive")
        if not 0 <= self.near_surface_fraction <= 1:
            raise ValueError("train.near_surface_fraction must lie in [0, 1]")


@dataclass
class ExtractionConfig:
    tau: float = 0.5
    start_res: int = 32
    upsample_steps: int = 2


@dataclass
class EvalConfig:
    n_samples: int = 10000         # 100000 for full-size runs
    iou_samples: int = 100000
    seed: int = 0


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, fusion_mode=self.fusion.mode, heads=self.fusion.heads)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["loss"]["lambda"] = d["loss"].pop("lam")
        d["data"]["kinds"] = list(d["data"]["kinds"])
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Config":
        return apply_overrides(cls(), _flatten(d))

    def with_overrides(self, overrides: Mapping[str, Any]) -> "Config":
        return apply_overrides(self, overrides)


def _flatten(d: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value: Any, current: Any, annotation: str) -> Any:
    if isinstance(value, str):
        if value.lower() in ("none", "null") and "None" in annotation:
            return None
        if isinstance(current, bool) or annotation == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"expected a boolean, got {value!r}")
        if isinstance(current, tuple):
            return tuple(s for s in value.split(",") if s)
        if isinstance(current, int) or annotation.startswith("int"):
            return int(value)
        if isinstance(current, float) or "float" in annotation:
            return float(value)
        return value
    if isinstance(current, tuple) and isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    return value


def apply_overrides(config: Config, overrides: Mapping[str, Any]) -> Config:
    """Return a copy of ``config`` with dotted keys (``section.field``) set."""
    sections = {f.name: dataclasses.asdict(getattr(config, f.name)) for f in dataclasses.fields(config)}
    types = {f.name: {g.name: str(g.type) for g in dataclasses.fields(getattr(config, f.name))}
             for f in dataclasses.fields(config)}
    for key, value in overrides.items():
        parts = key.split(".")
        if len(parts) != 2:
            raise KeyError(f"config keys look like section.field, got {key!r}")
        section, name = parts
        if section == "loss" and name == "lambda":
            name = "lam"
        if section not in sections or name not in sections[section]:
            raise KeyError(f"unknown config key {key!r}")
        sections[section][name] = _coerce(value, sections[section][name], types[section][name])
    kwargs = {}
    for f in dataclasses.fields(config):
        cls = type(getattr(config, f.name))
        kwargs[f.name] = cls(**sections[f.name])
    return Config(**kwargs)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> Config:
    config = Config()
    if path is not None:
        path = Path(path)
        text = path.read_bytes()
        if path.suffix.lower() == ".toml":
            data = tomllib.loads(text.decode())
        else:
            data = json.loads(text)
        config = Config.from_dict(data)
    if overrides:
        config = config.with_overrides(overrides)
    return config
