"""Experiment configuration: one JSON file drives every command."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import NetworkSpec, SpecError
from .evaluation import DEFAULT_BIN_EDGES
from .models import CMPM_HIDDEN, TrainConfig
from .rng import derive_seed

ENV_PREFIX = "CMPM_"
STAGE_KEYS = {"split": 11, "train": 12, "oversample": 13, "baseline": 14}


class ConfigError(ValueError):
    pass


@dataclass
class DetectorSection:
    penalty_multiplier: float = 1.0
    min_segment_len: int = 2
    enable_changepoint_expansion: bool = True


@dataclass
class PipelineSection:
    correlation_threshold: float = 0.95
    manifest: str | None = None  # None: the manifest written by `gen`


@dataclass
class ModelSection:
    hidden: list = field(default_factory=lambda: list(CMPM_HIDDEN))
    log_transform: bool = True
    train: dict = field(default_factory=lambda: {"optimizer": "adam", "lr": 0.002, "batch_size": 256,
                                                 "epochs": 100, "patience": 10, "schedule": "adaptive",
                                                 "weight_decay": 1.0})
    baseline_train: dict = field(default_factory=lambda: {"optimizer": "sgd", "lr": 0.001, "batch_size": 32,
                                                          "epochs": 200, "patience": 10})
    grid: bool = True
    oversample: bool = False
    oversample_threshold: float = 10.0
    oversample_factor: int = 5


@dataclass
class EvalSection:
    test_cell_fraction: float = 0.3
    bin_edges: list = field(default_factory=lambda: [e if math.isfinite(e) else None for e in DEFAULT_BIN_EDGES])


@dataclass
class ExperimentConfig:
    seed: int = 7
    workdir: str = "."
    generator: dict = field(default_factory=dict)
    detector: DetectorSection = field(default_factory=DetectorSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    model: ModelSection = field(default_factory=ModelSection)
    eval: EvalSection = field(default_factory=EvalSection)
    threads: int = 1

    # derived views ---------------------------------------------------------
    def network_spec(self) -> NetworkSpec:
        data = dict(self.generator)
        data["seed"] = self.seed
        try:
            return NetworkSpec.from_dict(data).validate()
        except SpecError as exc:
            raise ConfigError(f"generator section: {exc}") from exc
        except TypeError as exc:
            raise ConfigError(f"generator section: {exc}") from exc

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, STAGE_KEYS[stage]) >> 32

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**self.model.train, "seed": self.stage_seed("train")})

    def baseline_config(self) -> TrainConfig:
        return TrainConfig(**{**self.model.baseline_train, "seed": self.stage_seed("baseline")})

    def bin_edges(self) -> tuple:
        return tuple(math.inf if e is None else float(e) for e in self.eval.bin_edges)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        doc = self.to_dict()
        doc.pop("workdir")
        doc.pop("threads")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def validate(self) -> "ExperimentConfig":
        self.network_spec()
        try:
            self.train_config()
            self.baseline_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model section: {exc}") from exc
        if not 0 < self.eval.test_cell_fraction < 1:
            raise ConfigError("eval.test_cell_fraction must lie in (0, 1)")
        edges = self.bin_edges()
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigError("eval.bin_edges must be strictly increasing")
        if not 0 < self.pipeline.correlation_threshold <= 1:
            raise ConfigError("pipeline.correlation_threshold must lie in (0, 1]")
        if self.detector.min_segment_len < 1 or not self.detector.penalty_multiplier > 0:
            raise ConfigError("detector: min_segment_len >= 1 and penalty_multiplier > 0 required")
        if int(self.model.oversample_factor) != self.model.oversample_factor or self.model.oversample_factor < 1:
            raise ConfigError("model.oversample_factor must be an integer >= 1")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        return self


_SECTIONS = {"detector": DetectorSection, "pipeline": PipelineSection, "model": ModelSection, "eval": EvalSection}


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    unknown = set(data) - {f.name for f in dataclasses.fields(ExperimentConfig)}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTIONS:
            try:
                kwargs[key] = _SECTIONS[key](**value)
            except TypeError as exc:
                raise ConfigError(f"{key} section: {exc}") from exc
        else:
            kwargs[key] = value
    return ExperimentConfig(**kwargs)


def load(path=None, overrides: dict | None = None, environ=None) -> ExperimentConfig:
    """Config file, then ``CMPM_*`` environment variables, then explicit overrides."""
    data = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    environ = os.environ if environ is None else environ
    for key, cast in (("SEED", int), ("THREADS", int), ("WORKDIR", str)):
        if ENV_PREFIX + key in environ:
            data[key.lower()] = cast(environ[ENV_PREFIX + key])
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if name:
            data.setdefault(section, {})[name] = value
        else:
            data[key] = value
    return from_dict(data).validate()
