"""Run configuration: JSON with a fixed schema; unknown keys are rejected.

Example::

    {
      "seed": 0,
      "steps": 500,
      "encoder": {"fusion_mode": "dynamic", "k_inter": 2},
      "decoder": {"tsa": true},
      "loss": {"contrastive": 1.0},
      "optim": {"lr": 0.001},
      "data": {"scenario": "plain", "n_clips": 8}
    }

Omitted keys take the dataclass defaults. Loss weights default to the values
used for the full-scale model (cls 2, L1 5, GIoU 2, dice 5, focal 2).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .losses import LossWeights
from .synthclip import SCENARIOS


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration entries."""


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8
    grad_clip: float = 0.1

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"optim.lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"optim.{name} must lie in [0, 1), got {getattr(self, name)}")
        if self.weight_decay < 0 or self.grad_clip < 0 or self.eps <= 0:
            raise ValueError("optim.weight_decay and grad_clip must be >= 0 and eps > 0")


@dataclass(frozen=True)
class DataConfig:
    n_clips: int = 8
    n_frames: int = 3
    height: int = 32
    width: int = 32
    n_instances: int = 2
    scenario: str = "plain"
    clips_per_step: int = 8
    eval_seed_offset: int = 1000

    def validate(self) -> None:
        for name in ("n_clips", "n_frames", "height", "width", "n_instances", "clips_per_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"data.{name} must be >= 1, got {getattr(self, name)}")
        if self.scenario not in SCENARIOS:
            raise ValueError(f"data.scenario must be one of {SCENARIOS}, got {self.scenario!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    steps: int = 500
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def contrastive_enabled(self) -> bool:
        return self.loss.contrastive > 0

    def validate(self) -> "RunConfig":
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        try:
            self.encoder.validate()
            self.decoder.validate()
            self.loss.validate()
            self.optim.validate()
            self.data.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        stride = 2 ** (self.encoder.n_levels + 1)
        if self.data.height % stride or self.data.width % stride:
            raise ConfigError(f"data.height/width must be divisible by {stride} for {self.encoder.n_levels} levels")
        if self.encoder.temporal and self.data.n_frames < 2:
            raise ConfigError("encoder.temporal needs data.n_frames >= 2")
        if self.data.n_instances > self.decoder.n_queries:
            raise ConfigError(f"data.n_instances {self.data.n_instances} exceeds decoder.n_queries {self.decoder.n_queries}")
        if self.decoder.n_heads > 0 and self.encoder.hidden_dim % self.decoder.n_heads:
            raise ConfigError("encoder.hidden_dim must be divisible by decoder.n_heads")
        return self

    def replace(self, **sections) -> "RunConfig":
        """Copy with section fields overridden, e.g. ``replace(encoder={"k_inter": 3})``."""
        updates = {}
        for key, value in sections.items():
            current = getattr(self, key)
            if dataclasses.is_dataclass(current) and isinstance(value, dict):
                updates[key] = dataclasses.replace(current, **value)
            else:
                updates[key] = value
        return dataclasses.replace(self, **updates).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {"encoder": EncoderConfig, "decoder": DecoderConfig, "loss": LossWeights,
             "optim": OptimConfig, "data": DataConfig}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key) if key not in _SECTIONS else None
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where}.{key} must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where}.{key} must be a number")
            if isinstance(default, int) and not isinstance(default, bool) and not float(value).is_integer():
                raise ConfigError(f"{where}.{key} must be an integer")
            value = type(default)(value)
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{where}.{key} must be a string")
        kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {f.name for f in dataclasses.fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        else:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key} must be an integer")
            kwargs[key] = value
    return RunConfig(**kwargs).validate()


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON at offset {exc.pos}: {exc.msg}") from exc
    return config_from_dict(raw)
