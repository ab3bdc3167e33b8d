"""Flat training configuration, read from and echoed as JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from cloudfuse.errors import ValidationError
from cloudfuse.fusion_net import MICRO, FusionConfig
from cloudfuse.objective import LossConfig

ARCH_KEYS = tuple(f.name for f in fields(FusionConfig))
WEIGHT_SOURCES = ("score", "diff")


@dataclass(frozen=True)
class TrainConfig:
    # optimizer (adaptive moments, constant rate)
    learning_rate: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 2
    seed: int = 0
    # cloud-aware objective
    alpha: float = 0.8
    threshold: float = 0.2
    lambda1: float = 0.5
    lambda2: float = 0.5
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ablation_uniform_weight: bool = False
    weight_source: str = "score"
    # architecture
    s: int = 2
    channels: int = 64
    J: int = 4
    N: int = 3
    rdb_layers: int = 5
    rdb_growth: int = 32
    window: int = 8
    heads: int = 4
    mlp_ratio: float = 2.0
    # bookkeeping
    log_every: int = 10
    val_every: int = 0
    holdout_split: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValidationError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.weight_source not in WEIGHT_SOURCES:
            raise ValidationError(f"weight_source must be one of {WEIGHT_SOURCES}")
        self.fusion()
        self.loss()

    def fusion(self) -> FusionConfig:
        return FusionConfig(**{k: getattr(self, k) for k in ARCH_KEYS})

    def loss(self) -> LossConfig:
        return LossConfig(self.lambda1, self.lambda2, self.ssim_window, self.ssim_sigma)

    def to_dict(self) -> dict:
        return asdict(self)

    def arch(self) -> dict:
        return {k: getattr(self, k) for k in ARCH_KEYS}

    def update(self, **changes) -> "TrainConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        coerced = {}
        for key, value in values.items():
            default = getattr(cls, key)
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ValidationError(f"{key} must be true/false, got {value!r}")
            elif isinstance(default, int) and not (isinstance(value, int) and not isinstance(value, bool)):
                raise ValidationError(f"{key} must be an integer, got {value!r}")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ValidationError(f"{key} must be a number, got {value!r}")
                value = float(value)
            coerced[key] = value
        return cls(**coerced)

    @classmethod
    def micro(cls, **changes) -> "TrainConfig":
        """Small architecture for CPU smoke runs and tests."""
        return cls(**{**asdict(MICRO), **changes})


def load_config(path) -> TrainConfig:
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(values, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    return TrainConfig.from_dict(values)


def arch_diff(stored: dict, requested: dict) -> dict:
    return {k: (stored.get(k), requested.get(k)) for k in ARCH_KEYS if stored.get(k) != requested.get(k)}
