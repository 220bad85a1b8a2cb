"""Experiment configuration: YAML loading, validation and resolution."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from ..encoding import STATE_KINDS
from ..napo.trainer import TrainConfig

CONTROLLERS = ("napo", "fixed", "maxpressure", "advanced-mp", "random")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    # network: {"grid": [rows, cols]} or {"roadnet": path}
    network: dict = field(default_factory=lambda: {"grid": [2, 2]})
    # flow: {"synthetic": veh/h per entry link} or {"flow": path}
    flow: dict = field(default_factory=lambda: {"synthetic": 300.0})
    controller: str = "napo"
    state: str = "QDSE"
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    noise: list[float] = field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0])
    horizon: float = 3600.0
    decision_interval: float = 5.0
    fixed_plan: list[list[float]] = field(
        default_factory=lambda: [[0, 30.0], [1, 30.0], [2, 30.0], [3, 30.0]])

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.state not in STATE_KINDS:
            raise ConfigError(f"state must be one of {STATE_KINDS}, got {self.state!r}")
        steps = self.horizon / self.decision_interval
        if self.decision_interval <= 0 or abs(steps - round(steps)) > 1e-9:
            raise ConfigError("decision interval must divide the episode length")
        if len(self.network) != 1 or next(iter(self.network)) not in ("grid", "roadnet"):
            raise ConfigError("network needs exactly one of 'grid' or 'roadnet'")
        if len(self.flow) != 1 or next(iter(self.flow)) not in ("synthetic", "flow"):
            raise ConfigError("flow needs exactly one of 'synthetic' or 'flow'")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        self.seeds = [int(s) for s in self.seeds]

    def resolved(self) -> dict[str, Any]:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return ExperimentConfig(**d)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw or {})
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    train = raw.pop("train", None) or {}
    tknown = {f.name for f in fields(TrainConfig)}
    bad = set(train) - tknown
    if bad:
        raise ConfigError(f"unknown train keys: {sorted(bad)}")
    try:
        return ExperimentConfig(train=TrainConfig(**train), **raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw or {})
