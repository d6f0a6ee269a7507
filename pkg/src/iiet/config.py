"""Strict JSON run configuration: ``model``, ``train``, ``distill``, ``data`` and ``seed``."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .distill import DistillConfig
from .integrators import SolverSpec
from .model import IterationSchedule, ModelConfig
from .tensor import ConfigurationError
from .trainer import TrainConfig

SECTIONS = ("model", "train", "distill", "data", "seed", "precision")
PRECISIONS = ("float32", "float64")
SYNTHETIC_PREFIX = "synthetic:"


class ConfigError(ConfigurationError):
    """Invalid run configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class DataConfig:
    corpus: str
    val_fraction: float = 0.05

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ConfigError("data.val_fraction", f"must be in (0, 1), got {self.val_fraction}")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataConfig
    distill: DistillConfig | None = None
    seed: int = 0
    precision: str = "float32"

    def to_dict(self) -> dict:
        out = {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": dataclasses.asdict(self.data),
            "seed": self.seed,
            "precision": self.precision,
        }
        if self.distill is not None:
            d = self.distill.to_dict()
            if d["schedule"] is None:
                del d["schedule"]
            out["distill"] = d
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def resolve_corpus(self, base_dir=None) -> str:
        c = self.data.corpus
        if c.startswith(SYNTHETIC_PREFIX) or os.path.isabs(c) or base_dir is None:
            return c
        return os.path.join(base_dir, c)


def _build(cls, section: str, raw, nested: dict | None = None):
    if not isinstance(raw, dict):
        raise ConfigError(section, f"expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{section}.{key}", "unknown key")
    kwargs = dict(raw)
    for key, builder in (nested or {}).items():
        if key in kwargs and kwargs[key] is not None:
            kwargs[key] = builder(f"{section}.{key}", kwargs[key])
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ConfigurationError, TypeError, ValueError) as e:
        raise ConfigError(section, str(e)) from None


def _solver(section, raw):
    return _build(SolverSpec, section, raw)


def _schedule(section, raw):
    if not isinstance(raw, list) or not all(isinstance(x, int) for x in raw):
        raise ConfigError(section, "expected a list of integers")
    return IterationSchedule(tuple(raw))


def _train(section, raw):
    return _build(TrainConfig, section, raw)


def parse_run_config(raw: dict) -> RunConfig:
    """Validate a decoded JSON document; unknown or missing keys raise :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a JSON object")
    for key in raw:
        if key not in SECTIONS:
            raise ConfigError(key, "unknown key")
    data = raw.get("data")
    if not isinstance(data, dict) or not data.get("corpus"):
        raise ConfigError("data.corpus", "corpus path is required")
    if "model" not in raw:
        raise ConfigError("model", "section is required")
    model = _build(ModelConfig, "model", raw["model"], {"solver": _solver})
    train = _build(TrainConfig, "train", raw.get("train", {}))
    distill = None
    if raw.get("distill") is not None:
        distill = _build(DistillConfig, "distill", raw["distill"], {"schedule": _schedule, "train": _train})
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed", f"expected an integer, got {seed!r}")
    precision = raw.get("precision", "float32")
    if precision not in PRECISIONS:
        raise ConfigError("precision", f"expected one of {PRECISIONS}, got {precision!r}")
    return RunConfig(model, train, _build(DataConfig, "data", data), distill, seed, precision)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError("<root>", f"invalid JSON: {e}") from None
    return parse_run_config(raw)


def default_run_config(corpus: str = "synthetic:1000000", **model_overrides) -> RunConfig:
    return RunConfig(ModelConfig(**model_overrides), TrainConfig(), DataConfig(corpus))
