"""Run configuration: one JSON file with a section per module.

Missing sections take their defaults; unknown sections or keys are errors.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .conditioning import ConditioningConfig
from .estimation import EstimatorConfig, position_train_config, speed_train_config
from .mlp import TrainConfig
from .motor import MotorParams
from .simulator import SimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    motor: MotorParams = field(default_factory=MotorParams)
    simulation: SimConfig = field(default_factory=SimConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    train_position: TrainConfig = field(default_factory=position_train_config)
    train_speed: TrainConfig = field(default_factory=speed_train_config)

    SECTIONS = ("motor", "simulation", "conditioning", "estimator", "train_position", "train_speed")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        base = cls()
        kw = {}
        for name in cls.SECTIONS:
            if name not in d:
                continue
            section = d[name]
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            current = getattr(base, name).to_dict()
            current.pop("batch_mode", None)
            current.update(section)
            try:
                kw[name] = type(getattr(base, name)).from_dict(current)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section {name!r}: {exc}") from None
        return replace(base, **kw)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        try:
            d = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError(f"{p}: no such config file") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: top level must be an object")
        return cls.from_dict(d)

    def override(self, section: str, **values) -> "RunConfig":
        """Replace the given keys of one section; ``None`` values are ignored."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        cur = getattr(self, section)
        try:
            return replace(self, **{section: replace(cur, **values)})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {section!r}: {exc}") from None

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in self.SECTIONS}
