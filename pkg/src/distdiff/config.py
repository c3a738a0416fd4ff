"""Structured text configs: ``[section]`` headers with ``key = value`` lines.

Sections are ``data``, ``train``, ``score``, ``net`` and ``sampler``. Every key
maps onto a dataclass field; unknown keys are rejected with their full path.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .net import NetConfig
from .sampler import SamplerConfig
from .schedule import WeightFn
from .scoring import KernelSpec, ScoreConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "two_gaussians"
    size: int = 102400
    seed: int = 0


@dataclass(frozen=True)
class ScoreSection:
    lam: float = 1.0
    kernel: str = "energy"
    kernel_param: float = 1.0
    weight: str = "unit"
    weight_bias: float = 0.0

    def build(self) -> ScoreConfig:
        return ScoreConfig(self.lam, KernelSpec(self.kernel, self.kernel_param), WeightFn(self.weight, self.weight_bias))


@dataclass(frozen=True)
class TrainSection:
    steps: int = 20000
    batch: int = 128
    population: int = 32
    lr: float = 1e-3
    warmup: int = 100
    clip_norm: float = 1.0
    ema_decay: float = 0.99
    b1: float = 0.9
    b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    eta_safe: float = 1e-2
    dtype: str = "float32"
    target: str = "x0"


@dataclass(frozen=True)
class SamplerSection:
    steps: int = 5
    churn: float = 1.0
    eta_safe: float = 1e-2
    seed: int = 0
    count: int = 4096

    def build(self) -> SamplerConfig:
        return SamplerConfig(self.steps, self.churn, self.eta_safe, self.seed)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainSection = field(default_factory=TrainSection)
    score: ScoreSection = field(default_factory=ScoreSection)
    net: NetConfig = field(default_factory=NetConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)

    def train_config(self) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(
                steps=t.steps, batch=t.batch, population=t.population, score=self.score.build(), net=self.net,
                lr=t.lr, warmup=t.warmup, clip_norm=t.clip_norm, ema_decay=t.ema_decay, b1=t.b1, b2=t.b2,
                adam_eps=t.adam_eps, seed=t.seed, checkpoint_every=t.checkpoint_every, eta_safe=t.eta_safe,
                dtype=t.dtype, target=t.target,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


SECTIONS = {f.name: f for f in fields(RunConfig)}


def _coerce(section: str, key: str, proto, raw: str):
    kind = type(proto)
    try:
        if kind is bool:
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {kind.__name__}") from exc


def update(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{"section.key": value}`` overrides (strings or typed values)."""
    parts = {name: getattr(cfg, name) for name in SECTIONS}
    for path, value in overrides.items():
        if "." not in path:
            raise ConfigError(f"override {path!r} must look like section.key")
        section, key = path.split(".", 1)
        if section not in parts:
            raise ConfigError(f"{path}: unknown section {section!r}")
        obj = parts[section]
        names = {f.name for f in fields(obj)}
        if key not in names:
            raise ConfigError(f"{path}: unknown key {key!r}; expected one of {sorted(names)}")
        proto = getattr(obj, key)
        if isinstance(value, str):
            value = _coerce(section, key, proto, value)
        try:
            parts[section] = replace(obj, **{key: value})
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return RunConfig(**parts)


def load(path) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    overrides = {}
    for section in cp.sections():
        for key, raw in cp.items(section):
            overrides[f"{section}.{key}"] = raw
    return update(RunConfig(), overrides)


def dumps(cfg: RunConfig) -> str:
    lines = []
    for name in SECTIONS:
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(obj):
            v = getattr(obj, f.name)
            lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
        lines.append("")
    return "\n".join(lines)


def as_dict(cfg: RunConfig) -> dict:
    return {name: {f.name: getattr(getattr(cfg, name), f.name) for f in fields(getattr(cfg, name))} for name in SECTIONS}
