"""Run configuration: one JSON document with a section per pipeline stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .conformal import SCORE_MODES
from .predictor import TrainConfig
from .safety import FilterParams
from .sim import PedestrianParams, WorldConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PredictorConfig:
    feature_window: int = 5
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass(frozen=True)
class ConformalConfig:
    alphas: tuple[float, ...] = (0.15, 0.25, 0.5)
    score_mode: str = "per_step"
    n_bins: int = 60

    def __post_init__(self):
        if not self.alphas or any(not 0 <= a <= 1 for a in self.alphas):
            raise ValueError("alphas must be a non-empty list of values in [0, 1]")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}")
        if self.n_bins < 1:
            raise ValueError("n_bins must be at least 1")


@dataclass(frozen=True)
class ExperimentConfig:
    n_trials: int = 10_000
    train_samples: int = 1_000_000
    cal_samples: int = 100_000
    chunk: int = 2048

    def __post_init__(self):
        if self.n_trials < 0:
            raise ValueError("n_trials must be non-negative")
        if self.train_samples < 1 or self.cal_samples < 1:
            raise ValueError("sample counts must be positive")
        if self.chunk < 1:
            raise ValueError("chunk must be positive")


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    pedestrian: PedestrianParams = field(default_factory=PedestrianParams)
    predictor: PredictorConfig = field(default_factory=PredictorConfig)
    conformal: ConformalConfig = field(default_factory=ConformalConfig)
    filter: FilterParams = field(default_factory=FilterParams)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    master_seed: int = 0
    output_dir: str = "out"

    def __post_init__(self):
        if self.filter.u_min < self.world.speed_min or self.filter.u_max > self.world.speed_max:
            raise ValueError("filter.u_min/u_max must lie inside the world speed range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conformal"]["alphas"] = list(self.conformal.alphas)
        return d


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key {path}.{unknown[0]}" if path else f"unknown config key {unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTIONS.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}.{name}" if path else name) if sub else value
    if cls is ConformalConfig and "alphas" in kwargs:
        kwargs["alphas"] = tuple(kwargs["alphas"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or 'config'}: {e}") from None


_SECTIONS = {
    (RunConfig, "world"): WorldConfig,
    (RunConfig, "pedestrian"): PedestrianParams,
    (RunConfig, "predictor"): PredictorConfig,
    (RunConfig, "conformal"): ConformalConfig,
    (RunConfig, "filter"): FilterParams,
    (RunConfig, "experiment"): ExperimentConfig,
    (PredictorConfig, "train"): TrainConfig,
}


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(data)
