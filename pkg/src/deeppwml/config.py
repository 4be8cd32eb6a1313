"""Experiment configuration: one file drives data generation, training, inference and evaluation."""

from __future__ import annotations

import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import networks as nw
from .phantom import PhantomConfig
from .training import STAGES, StageConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DATA_DIR_ENV = "DEEPPWML_DATA_DIR"


class ConfigError(ValueError):
    pass


def _default_stages():
    return {
        "tseg": {"epochs": 50},
        "cls": {"epochs": 30},
        "cmg": {"epochs": 50, "network": {"depth": 2, "init_channels": 16}},
        "pseg": {"epochs": 50},
    }


def _default_fusions():
    return [nw.fusion_tag(f) for f in (*nw.ABLATION_FUSIONS, nw.BASELINE_FUSION)]


@dataclass
class SamplingConfig:
    n_pos: int = 8
    n_neg: int = 8
    n_control: int = 12
    pseg_n_neg: int = 4
    jitter: int = 15


@dataclass
class InferenceConfig:
    stride: int = 16
    threshold: float = 0.5
    fusion_sets: list = field(default_factory=_default_fusions)
    primary_fusion: str = "t1+sp+cf"
    batch_size: int = 16


@dataclass
class ExperimentConfig:
    seed: int = 1
    phantom: dict = field(default_factory=dict)
    cohort: dict = field(default_factory=lambda: {"n_control": 52, "n_pwml": 47})
    splits: dict = field(default_factory=lambda: {"ratios": [0.7, 0.15, 0.15]})
    sampling: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)
    stages: dict = field(default_factory=_default_stages)
    inference: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)

    # ---- typed views

    @property
    def phantom_config(self) -> PhantomConfig:
        return PhantomConfig.from_dict(self.phantom)

    @property
    def sampling_config(self) -> SamplingConfig:
        return SamplingConfig(**self.sampling)

    @property
    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(**self.inference)

    @property
    def ratios(self) -> tuple:
        return tuple(self.splits.get("ratios", (0.7, 0.15, 0.15)))

    def stage_config(self, stage: str, fusion=None) -> StageConfig:
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        d = dict(self.stages.get(stage, {}))
        net = {**self.network, **d.pop("network", {})}
        d.setdefault("seed", self.seed + 1000 * (STAGES.index(stage) + 1))
        if stage == "pseg":
            d["fusion"] = nw.fusion_tag(fusion or self.inference_config.primary_fusion)
        return StageConfig(stage=stage, network=net, **d)

    def path(self, key: str) -> Path:
        defaults = {
            "data_dir": os.environ.get(DATA_DIR_ENV, "deeppwml-data"),
            "checkpoint_dir": None,
            "report_dir": None,
        }
        value = self.paths.get(key) or defaults[key]
        if value is None:
            value = Path(self.path("data_dir")).parent / {"checkpoint_dir": "checkpoints", "report_dir": "reports"}[key]
        return Path(value)

    # ---- validation

    def validate(self) -> "ExperimentConfig":
        try:
            self.phantom_config
            s = self.sampling_config
            inf = self.inference_config
            for stage in STAGES:
                self.stage_config(stage)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        r = self.ratios
        if len(r) != 3 or any(x < 0 for x in r) or not math.isclose(sum(r), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {list(r)}")
        if self.cohort.get("n_control", 0) < 0 or self.cohort.get("n_pwml", 0) < 0:
            raise ConfigError("cohort sizes must be >= 0")
        if min(s.n_pos, s.n_neg, s.n_control, s.pseg_n_neg) < 0:
            raise ConfigError("sampling counts must be >= 0")
        allowed = set(_default_fusions())
        try:
            tags = [nw.fusion_tag(f) for f in inf.fusion_sets] + [nw.fusion_tag(inf.primary_fusion)]
        except nw.NetworkConfigError as exc:
            raise ConfigError(str(exc)) from exc
        bad = [t for t in tags if t not in allowed]
        if bad:
            raise ConfigError(f"fusion sets {bad} are not among {sorted(allowed)}")
        if inf.stride < 1 or not 0.0 <= inf.threshold <= 1.0:
            raise ConfigError("stride must be >= 1 and threshold in [0, 1]")
        for key in ("data_dir", "checkpoint_dir", "report_dir"):
            _check_creatable(self.path(key))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def override(self, seed=None, stride=None, threshold=None) -> "ExperimentConfig":
        d = self.to_dict()
        if seed is not None:
            d["seed"] = int(seed)
        if stride is not None:
            d["inference"]["stride"] = int(stride)
        if threshold is not None:
            d["inference"]["threshold"] = float(threshold)
        return ExperimentConfig(**d)


def _check_creatable(path: Path):
    p = path.resolve()
    while not p.exists():
        p = p.parent
    if not p.is_dir() or not os.access(p, os.W_OK):
        raise ConfigError(f"cannot create {path}: {p} is not a writable directory")


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    path = Path(path)
    text = path.read_text()
    try:
        raw = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(raw) - set(ExperimentConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    cfg = ExperimentConfig(**raw)
    # relative paths are taken relative to the config file
    for key, value in list(cfg.paths.items()):
        if value and not Path(value).is_absolute():
            cfg.paths[key] = str(path.parent / value)
    return cfg.validate()
