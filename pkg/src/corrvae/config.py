"""Run configuration: one flat JSON object with dotted keys.

Command-line flags override file values and the merged result is always
written next to the run's outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str = ""
    n_test: int = 1000
    include_shape: bool = False


@dataclass
class ModelConfig:
    l: int = 8
    d_z: int = 8
    hidden: int = 256
    agg_hidden: int = 32
    head_hidden: int = 32
    head_layers: int = 2
    head_c: float = 0.97
    head_activation: str = "tanh"
    aggregator: str = "mlp"          # "mlp" | "linear" (CorrVAE-2 ablation)
    mask_mode: str = "learned"       # "learned" | "ground_truth" (CorrVAE-1 ablation)
    mask_init_logit: float = 1.0


@dataclass
class LossConfig:
    rho1: float = 1.0
    rho2: float = 1.0
    lambda3: float = 1.0
    lambda_mask: float = 1e-2


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 1e-3
    lr_mask: float = 0.0             # 0 -> same as lr
    epochs: int = 30
    batch_size: int = 64
    tau_start: float = 1.0
    tau_end: float = 0.1
    power_iters: int = 5
    certify_iters: int = 50


@dataclass
class GenConfig:
    seed: int = 0
    mu: float = 0.1
    restarts: int = 8
    steps: int = 500
    lr: float = 0.05
    rounds: int = 4
    penalty_growth: float = 10.0
    value_tol: float = 0.05
    range_tol: float = 0.0
    z_policy: str = "fixed"          # "fixed" | "sampled"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    out: str = ""

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if hasattr(value, "__dataclass_fields__"):
                flat.update({f"{f.name}.{k}": v for k, v in asdict(value).items()})
            else:
                flat[f.name] = value
        return flat

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        return cfg.updated(flat)

    def updated(self, flat: dict[str, Any]) -> "RunConfig":
        merged = self.to_flat()
        for key, value in flat.items():
            if key not in merged:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, merged[key], value)
        cfg = RunConfig()
        for key, value in merged.items():
            if "." in key:
                section, name = key.split(".", 1)
                setattr(getattr(cfg, section), name, value)
            else:
                setattr(cfg, key, value)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        for key, value in self.to_flat().items():
            if key.startswith("loss.") and value < 0:
                raise ConfigError(f"{key} must be non-negative")
        if self.gen.mu < 0:
            raise ConfigError("gen.mu must be non-negative")
        if self.train.batch_size < 2:
            raise ConfigError("train.batch_size must be at least 2")
        if self.model.aggregator not in ("mlp", "linear"):
            raise ConfigError("model.aggregator must be 'mlp' or 'linear'")
        if self.model.mask_mode not in ("learned", "ground_truth"):
            raise ConfigError("model.mask_mode must be 'learned' or 'ground_truth'")
        if self.gen.z_policy not in ("fixed", "sampled"):
            raise ConfigError("gen.z_policy must be 'fixed' or 'sampled'")
        if not 0 < self.model.head_c < 1:
            raise ConfigError("model.head_c must lie in (0, 1)")
        if self.train.tau_start <= 0 or self.train.tau_end <= 0:
            raise ConfigError("temperatures must be positive")


def _coerce(key: str, default: Any, value: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{key} expects an integer, got {value}")
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r}") from None
    return str(value)


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    flat: dict[str, Any] = {}
    if path:
        try:
            flat = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(flat, dict):
            raise ConfigError("config file must hold a JSON object")
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)


def write_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_flat(), indent=2, sort_keys=True) + "\n")
    return path
