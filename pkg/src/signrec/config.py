"""Experiment configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .errors import ConfigError


@dataclass
class TrainConfig:
    dim: int = 64
    layers: int = 2
    lr: float = 0.005
    batch_size: int = 1024
    epochs: int = 200
    reg_weight: float = 1e-4
    # multipliers on the auxiliary terms; 1.0 is the plain sum
    bpr_neg_weight: float = 1.0
    mse_weight: float = 1.0
    ortho_weight: float = 1.0
    c1: float = 1.5
    c2: float = 1.5
    signed_neg_bpr: bool = False
    delta: float = 2.5
    negatives_per_obs: int = 1
    lr_milestones: tuple[int, ...] = (100, 150)
    lr_gamma: float = 0.5
    seed: int = 0
    enable_bpr_neg: bool = True
    enable_mse: bool = True
    enable_ortho: bool = True
    enable_filter: bool = True
    filter_k: int = 0  # 0: same K as the recommendation list
    precision: str = "double"
    eval_every: int = 10
    eval_k: tuple[int, ...] = (10, 20)
    # dataset preparation
    min_user: int = 5
    min_item: int = 5
    split_ratio: float = 0.8
    num_folds: int = 5
    separator: str = "tab"

    def __post_init__(self) -> None:
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        self.eval_k = tuple(int(k) for k in self.eval_k)
        self.validate()

    def validate(self) -> None:
        positive = ("dim", "layers", "batch_size", "negatives_per_obs", "eval_every", "num_folds")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lr", "reg_weight", "bpr_neg_weight", "mse_weight", "ortho_weight", "epochs", "min_user", "min_item", "filter_k"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError("c1 and c2 must be positive")
        if self.lr_gamma <= 0:
            raise ConfigError("lr_gamma must be positive")
        ms = self.lr_milestones
        if any(m < 1 for m in ms) or any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError("lr_milestones must be positive and strictly increasing")
        if self.precision not in ("single", "double"):
            raise ConfigError("precision must be 'single' or 'double'")
        if not self.eval_k or min(self.eval_k) < 1:
            raise ConfigError("eval_k needs at least one K >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ConfigError("split_ratio must lie strictly between 0 and 1")
        if self.separator not in ("tab", "comma"):
            raise ConfigError("separator must be 'tab' or 'comma'")

    @property
    def dtype(self):
        import numpy as np

        return np.float64 if self.precision == "double" else np.float32

    def replace(self, **changes: Any) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        lines = []
        for name, value in self.to_dict().items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, values: dict[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        base = base or cls()
        known = {f.name: f for f in fields(cls)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _coerce(getattr(base, key), raw, key)
        return dataclasses.replace(base, **changes)

    @classmethod
    def load(cls, path: str | Path, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_mapping(parse_config_text(Path(path).read_text()), base)


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(current: Any, raw: Any, key: str) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


__all__ = ["TrainConfig", "parse_config_text"]
