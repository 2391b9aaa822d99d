"""Experiment configuration: one JSON file with feature/model/schedule/simulator/eval sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .features import ConfigError, FeatureConfig
from .model import ModelConfig
from .scenes import SimulatorConfig

PRESETS = ("desk", "paper")


@dataclass(frozen=True)
class TrainSchedule:
    lambda_start_step: int = 200
    lambda_end_step: int = 2000
    lambda_max: float = 100.0
    alpha_unfreeze_step: int = 3000
    alpha_fixed_value: float = 0.5
    total_steps: int = 5000
    learning_rate: float = 1e-3
    seed: int = 0
    batch_size: int = 8
    checkpoint_every: int = 1000
    log_every: int = 10
    clip_norm: float | None = None

    def __post_init__(self):
        if not 0 <= self.lambda_start_step < self.lambda_end_step <= self.total_steps:
            raise ConfigError("need 0 <= lambda_start_step < lambda_end_step <= total_steps")
        if not 0.0 <= self.alpha_fixed_value <= 1.0:
            raise ConfigError("alpha_fixed_value must be in [0, 1]")
        if self.batch_size < 1 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("batch_size, checkpoint_every and log_every must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EvalConfig:
    snr_buckets: tuple[float, ...] = (-5.0, 0.0, 20.0, 60.0)
    ser_buckets: tuple[float, ...] = (-10.0, -5.0, 0.0, 5.0)
    n_per_bucket: int = 16
    seed: int = 9001
    sweep_alphas: tuple[float, ...] = (1e-6, 0.25, 0.5, 0.75, 1.0)
    sweep_level_db: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("snr_buckets", "ser_buckets", "sweep_alphas"):
            d[k] = list(d[k])
        return d


@dataclass(frozen=True)
class GradcheckConfig:
    frames: int = 4
    batch: int = 1
    lambda_asr: float = 1.0
    eps: float = 2e-4  # with the 4th-order stencil; much smaller steps hit roundoff
    seed: int = 0
    tolerance: float = 1e-4
    max_per_param: int | None = None  # None checks every element
    probes: int = 256  # perturbed copies evaluated per vectorised pass
    order: int = 4  # central stencil order


@dataclass(frozen=True)
class ExperimentConfig:
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def __post_init__(self):
        if self.model.mask_dim != self.feature.feature_dim:
            raise ConfigError(
                f"model.mask_dim={self.model.mask_dim} must equal n_mels*stack={self.feature.feature_dim}"
            )
        if self.model.mode != self.simulator.mode:
            raise ConfigError(f"model.mode={self.model.mode!r} != simulator.mode={self.simulator.mode!r}")

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.to_dict(),
            "model": self.model.to_dict(),
            "schedule": self.schedule.to_dict(),
            "simulator": self.simulator.to_dict(),
            "eval": self.eval.to_dict(),
            "gradcheck": asdict(self.gradcheck),
        }

    def with_mode(self, mode: str) -> "ExperimentConfig":
        return replace(self, model=replace(self.model, mode=mode), simulator=replace(self.simulator, mode=mode))


_SECTIONS = {
    "feature": FeatureConfig,
    "model": ModelConfig,
    "schedule": TrainSchedule,
    "simulator": SimulatorConfig,
    "eval": EvalConfig,
    "gradcheck": GradcheckConfig,
}


def _build(cls, values: dict[str, Any], section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    cooked = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**cooked)


def preset(name: str = "desk") -> dict[str, dict[str, Any]]:
    """Section overrides for a named preset (empty dicts mean class defaults)."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    if name == "desk":
        return {k: {} for k in _SECTIONS}
    return {
        "feature": {"n_mels": 128},
        "model": {"layers": 4, "units": 256, "ffn_dim": 1024, "conv_kernel": 15,
                  "left_context": 31, "mask_dim": 512, "asr_hidden": 256},
        "schedule": {"lambda_start_step": 20000, "lambda_end_step": 200000,
                     "alpha_unfreeze_step": 200000, "total_steps": 300000,
                     "checkpoint_every": 10000, "log_every": 100},
        "simulator": {"noise_context": 6.0},
        "eval": {},
        "gradcheck": {},
    }


def build_config(overrides: dict | None = None, preset_name: str = "desk") -> ExperimentConfig:
    merged = preset(preset_name)
    for section, values in (overrides or {}).items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        merged[section] = {**merged[section], **values}
    # mode lives in two sections; setting it once is enough
    mode = merged["model"].get("mode", merged["simulator"].get("mode"))
    if mode is not None:
        merged["model"].setdefault("mode", mode)
        merged["simulator"].setdefault("mode", mode)
    built = {k: _build(cls, merged[k], k) for k, cls in _SECTIONS.items()}
    return ExperimentConfig(**built)


def load_config(path: str | Path | None, preset_name: str = "desk") -> ExperimentConfig:
    if path is None:
        return build_config(None, preset_name)
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return build_config(data, preset_name)
