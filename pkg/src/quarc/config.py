"""TOML experiment configuration.

Layout::

    seed = 0
    seeds = [0, 1, 2]

    [data]                 # DataConfig fields
    source = "synthetic"
    [data.synthetic]       # SyntheticSpec fields

    [model]                # ModelDef fields minus input_shape/num_classes
    [pretrain]             # epochs, batch_size, [pretrain.optimizer]
    [run]                  # RunConfig fields, [run.optimizer]
    preset = "cifar"       # optional: named hyperparameter preset as the run base

    [[plan]]               # ablation entries: name + RunConfig overrides
    name = "baseline"

    [correlate]            # buckets, S, seeds
    [bench]                # fractions
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import tomli

from .data import DataConfig, Dataset, SyntheticSpec
from .errors import ConfigError
from .models import ModelDef
from .trainer import PRESETS, OptimizerConfig, RunConfig

DEFAULT_WIDTHS = [8, 8]


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 32
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(lr=0.05))


@dataclass
class PlanEntry:
    name: str
    overrides: dict


@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    data: DataConfig = field(default_factory=DataConfig)
    model: dict = field(default_factory=dict)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    run: RunConfig = field(default_factory=RunConfig)
    plan: list = field(default_factory=list)
    correlate: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    def model_def(self, train: Dataset) -> ModelDef:
        m = dict(self.model)
        m.setdefault("arch", "mlp" if len(train.feature_shape) == 1 else "cnn")
        m.setdefault("widths", DEFAULT_WIDTHS)
        m.setdefault("quantize_first_last", True)
        try:
            return ModelDef(input_shape=train.feature_shape, num_classes=train.num_classes, **m)
        except TypeError as exc:
            raise ConfigError(f"[model]: {exc}") from None

    def plan_configs(self) -> list:
        names = [p.name for p in self.plan]
        if len(set(names)) != len(names):
            raise ConfigError("plan names must be unique")
        return [(p.name, run_with(self.run, p.overrides)) for p in self.plan]


def _known(cls, d: dict, section: str) -> dict:
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")
    return d


def _optimizer(d: Optional[dict], base: Optional[OptimizerConfig] = None) -> OptimizerConfig:
    if d is None:
        return base or OptimizerConfig()
    _known(OptimizerConfig, d, "optimizer")
    return replace(base, **d) if base is not None else OptimizerConfig(**d)


def run_with(base: RunConfig, overrides: dict) -> RunConfig:
    o = dict(overrides)
    o.pop("name", None)
    _known(RunConfig, {k: v for k, v in o.items()}, "run")
    if "optimizer" in o:
        o["optimizer"] = _optimizer(o["optimizer"], base.optimizer)
    if "metrics" in o:
        o["metrics"] = tuple(o["metrics"])
    try:
        return replace(base, **o)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_config(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    _known(ExperimentConfig, raw, "top level")
    data_raw = dict(raw.get("data", {}))
    syn = data_raw.pop("synthetic", {})
    _known(DataConfig, data_raw, "data")
    _known(SyntheticSpec, syn, "data.synthetic")
    data = DataConfig(synthetic=SyntheticSpec(**syn), **data_raw)

    pre_raw = dict(raw.get("pretrain", {}))
    _known(PretrainConfig, pre_raw, "pretrain")
    pre_opt = _optimizer(pre_raw.pop("optimizer", None), PretrainConfig().optimizer)
    pretrain = PretrainConfig(optimizer=pre_opt, **pre_raw)

    run_raw = dict(raw.get("run", {}))
    preset = run_raw.pop("preset", None)
    base = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        base = replace(base, **PRESETS[preset])
    run = run_with(base, run_raw)

    plan = []
    for entry in raw.get("plan", []):
        if "name" not in entry:
            raise ConfigError("every [[plan]] entry needs a name")
        plan.append(PlanEntry(entry["name"], {k: v for k, v in entry.items() if k != "name"}))

    cfg = ExperimentConfig(
        seed=int(raw.get("seed", 0)),
        seeds=list(raw.get("seeds", [0, 1, 2])),
        data=data,
        model=dict(raw.get("model", {})),
        pretrain=pretrain,
        run=run,
        plan=plan,
        correlate=dict(raw.get("correlate", {})),
        bench=dict(raw.get("bench", {})),
    )
    cfg.plan_configs()  # validate overrides early
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text())
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    try:
        return parse_config(raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
