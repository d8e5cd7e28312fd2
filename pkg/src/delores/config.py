"""Run configuration: YAML file + command-line overrides over typed defaults.

Schema (every section and key optional; unknown keys are rejected)::

    seed: 0
    trainer:  {epochs, batch_size, lam, deterministic, workers}
    dsp:      {sample_rate, window_ms, hop_ms, n_mels, fmin, fmax, log_floor, pretrain_frames}
    augment:  {mixup_queue_size, mix_ratio_max, freq_range, time_range, virtual_time_factor}
    model:    {n_mels, channels, hidden, proj_dim, dropout, proj_dropout, bn_eps, bn_momentum}
    lars:     {base_lr_weights, base_lr_biases, momentum, weight_decay, trust_coefficient}
    schedule: {warmup_epochs, total_epochs, final_lr_fraction}
    eval:     {lr, beta1, beta2, eps, batch_size, max_epochs, frames}

Precedence is flags > file > defaults. ``frames: null`` means "derive the
downstream crop width from the manifest's average clip duration".
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .dsp import DspConfig
from .errors import ConfigError
from .model import ModelConfig
from .objective import DEFAULT_LAMBDA
from .optim import AdamConfig, LarsConfig, ScheduleConfig
from .trainer import PretrainConfig

SNAPSHOT_NAME = "config.resolved.yaml"


@dataclass(frozen=True)
class TrainerSection:
    epochs: int = 100
    batch_size: int = 64
    lam: float = DEFAULT_LAMBDA
    deterministic: bool = True
    workers: int = 0


@dataclass(frozen=True)
class EvalSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    max_epochs: int = 100
    frames: int | None = None

    def adam(self, **over):
        d = {k: v for k, v in dataclasses.asdict(self).items() if k != "frames"}
        d.update({k: v for k, v in over.items() if v is not None})
        return AdamConfig(**d)


_SECTIONS = {
    "trainer": TrainerSection,
    "dsp": DspConfig,
    "augment": AugmentConfig,
    "model": ModelConfig,
    "lars": LarsConfig,
    "schedule": ScheduleConfig,
    "eval": EvalSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    trainer: TrainerSection = field(default_factory=TrainerSection)
    dsp: DspConfig = field(default_factory=DspConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    lars: LarsConfig = field(default_factory=LarsConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def pretrain_config(self):
        t = self.trainer
        return PretrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, seed=self.seed, lam=t.lam,
            deterministic=t.deterministic, workers=t.workers, dsp=self.dsp,
            augment=self.augment, model=self.model, lars=self.lars, schedule=self.schedule,
        )

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k in ("freq_range", "time_range"):
            d["augment"][k] = list(d["augment"][k])
        return d

    def write_snapshot(self, out_dir, name=SNAPSHOT_NAME):
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")
        return path


def _build_section(name, values):
    typ = _SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"config section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(typ)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    values = dict(values)
    for k in ("freq_range", "time_range"):
        if k in values:
            values[k] = tuple(values[k])
    try:
        return typ(**values)
    except TypeError as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def from_dict(d):
    """Build a :class:`RunConfig` from a (possibly partial) nested mapping."""
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    unknown = sorted(set(d) - set(_SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {name: _build_section(name, d[name]) for name in _SECTIONS if name in d}
    if "seed" in d:
        kwargs["seed"] = _as_int("seed", d["seed"])
    return RunConfig(**kwargs)


def _as_int(name, value):
    try:
        return int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name} must be an integer, got {value!r}") from exc


def load_file(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        return yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc


def resolve(path=None, overrides=None, env=None):
    """Defaults, then the file at ``path``, then ``overrides``.

    ``overrides`` maps dotted keys (``"trainer.epochs"``) to values; ``None``
    values are skipped. When neither the file nor the overrides set a seed,
    ``DELORES_SEED`` from ``env`` (default ``os.environ``) is used.
    """
    env = os.environ if env is None else env
    d = load_file(path) if path is not None else {}
    if not isinstance(d, dict):
        raise ConfigError("config file must contain a mapping at the top level")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "seed" not in d and "seed" not in overrides and env.get("DELORES_SEED"):
        overrides["seed"] = _as_int("DELORES_SEED", env["DELORES_SEED"])
    for key, value in overrides.items():
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(d)
