"""Experiment configuration: nested dataclasses, YAML files, ``key=value`` overrides.

Every field has a default; unknown keys are rejected with their dotted path.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class DataConfig:
    episodes: int = 10
    steps: int = 200
    policy: str = "random"  # random | zero
    smoothing: float = 0.8


@dataclass
class ModelConfig:
    deter: int = 64
    stoch: int = 16
    hidden: int = 64
    embed: int = 64
    phase_dim: int = 8
    split_index: int | None = None
    ph_hidden: list = field(default_factory=lambda: [64, 64])
    ph_mode: str = "constant"
    ph_enabled: bool = True
    ph_horizon: int = 1
    lr: float = 1e-3
    ph_lr: float = 1e-3
    beta: float = 1.0
    kl_balance: float = 0.8
    free_bits: float = 1.0
    lambda_max: float = 1.0
    warmup_frac: float = 0.1
    ramp_frac: float = 0.4
    batch: int = 16
    seq_len: int = 32
    replay_capacity: int = 100_000


@dataclass
class EnergyConfig:
    k: int = 4
    hidden: list = field(default_factory=lambda: [64, 64])
    epochs: int = 30
    batch_size: int = 256
    lr: float = 3e-3
    w_energy: float = 1.0
    w_next: float = 1.0
    w_momentum: float = 1.0
    use_oracle_momentum: bool = True


@dataclass
class ACSection:
    horizon: int = 15
    discount_horizon: float = 100.0
    return_lambda: float = 0.95
    entropy_scale: float = 3e-4
    alpha_p: float = 1.0
    alpha_v: float = 1.0
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    slow_decay: float = 0.98
    quantile_decay: float = 0.99
    hidden: list = field(default_factory=lambda: [64, 64])
    constraint_source: str = "replay"
    constraint_batch: int = 64
    constraint_recent_episodes: int = 10
    lambda_e_init: float = 0.0
    lambda_s_init: float = 0.0
    eps_e: float | None = None
    eps_s: float | None = None
    eta_lambda: float = 1e-2
    eps_percentile: float = 60.0
    calibration_batches: int = 8


@dataclass
class StageConfig:
    prefill_episodes: int = 5
    stage1_episodes: int = 40
    stage2_episodes: int = 20
    updates_per_episode: int = 50
    constrained: bool = True
    checkpoint_every: int = 10


@dataclass
class EvalConfig:
    episodes: int = 10
    alpha: float = 1.0
    beta: float = 0.01
    n_components: int | None = None
    deterministic: bool = True


@dataclass
class ExperimentConfig:
    env: str = "pendulum"
    env_overrides: dict = field(default_factory=dict)
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    ac: ACSection = field(default_factory=ACSection)
    stages: StageConfig = field(default_factory=StageConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """Hash of everything except the output directory."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    for item in overrides or []:
        apply_override(data, item)
    return from_dict(data)


def apply_override(data: dict, item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    key, raw = item.split("=", 1)
    value: Any = yaml.safe_load(raw)
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = value


def dump_config(cfg: ExperimentConfig, path: str | Path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
