"""Experiment configuration: one JSON document drives every pipeline stage."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .backbone import OptimizerConfig
from .datagen import DatasetConfig, DiseaseConfig
from .evalmetrics import LITERAL_MEDIAN, MEDIAN_HEURISTIC, MetricConfig

OUTPUT_ROOT_ENV = "REBA_OUTPUT_ROOT"
LABEL_MODES = ("soft", "init", "chron")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_m: int = 32
    d_p: int = 16
    hidden: int = 32
    channels: list[int] = field(default_factory=lambda: [8, 16, 16])


def _default_student_opt() -> OptimizerConfig:
    # the student head starts from scratch on cached embeddings; 1e-4 underfits at 25 steps/epoch
    return OptimizerConfig(lr=1e-3)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher_opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    student_opt: OptimizerConfig = field(default_factory=_default_student_opt)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    alpha: float = 1.0
    eta: float = 0.1
    zeta: float = 1.0
    use_film: bool = True
    use_student: bool = True
    labels: str = "soft"
    detach_network_mean: bool = False
    dilate_occlusion: bool = False
    ablation_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    root: str = ""

    @property
    def seed(self) -> int:
        return self.dataset.seed

    def output_root(self) -> Path:
        return Path(self.root or os.environ.get(OUTPUT_ROOT_ENV, "reba-runs"))

    def validate(self) -> None:
        try:
            self.dataset.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        for name in ("teacher_opt", "student_opt"):
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from exc
        if self.alpha < 0 or self.eta < 0 or self.zeta < 0:
            raise ConfigError("alpha, eta and zeta must be non-negative")
        if self.model.d_m < 4 or self.model.d_p < 1 or self.model.hidden < 1:
            raise ConfigError("model sizes must be positive (d_m >= 4)")
        if self.labels not in LABEL_MODES:
            raise ConfigError(f"labels must be one of {LABEL_MODES}, got {self.labels!r}")
        if self.metrics.bandwidth not in (MEDIAN_HEURISTIC, LITERAL_MEDIAN):
            try:
                if float(self.metrics.bandwidth) <= 0:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"bandwidth must be a rule name or a positive number, got {self.metrics.bandwidth!r}") from None
        if self.metrics.bandwidth_fallback <= 0:
            raise ConfigError("bandwidth_fallback must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> ExperimentConfig:
        return _build(cls, obj)

    @classmethod
    def from_json(cls, text: str) -> ExperimentConfig:
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def override(self, dotted: str, value: Any) -> None:
        """Set ``a.b.c`` to ``value``; strings are parsed as JSON when possible."""
        if isinstance(value, str):
            try:
                value = json.loads(value)
            except json.JSONDecodeError:
                pass
        *path, last = dotted.split(".")
        target: Any = self
        for part in path:
            if not hasattr(target, part):
                raise ConfigError(f"unknown config key {dotted!r}")
            target = getattr(target, part)
        if not is_dataclass(target) or last not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {dotted!r}")
        current = getattr(target, last)
        if is_dataclass(current):
            raise ConfigError(f"{dotted!r} is a section; set its fields individually")
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{dotted!r} expects true/false")
        if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if dotted == "dataset.diseases":
            value = [DiseaseConfig(**d) if isinstance(d, dict) else d for d in value]
        setattr(target, last, value)

    def digest(self, *sections: str) -> str:
        """SHA-256 of the canonical JSON of the whole config or of selected keys."""
        obj = self.to_dict()
        obj.pop("root", None)
        if sections:
            obj = {k: obj[k] for k in sections}
        return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _build(cls, obj: dict):
    if not isinstance(obj, dict):
        raise ConfigError(f"expected an object for {cls.__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(obj) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in obj.items():
        current = getattr(defaults, name)
        kwargs[name] = _build(type(current), value) if is_dataclass(current) else value
    return cls(**kwargs)
