"""Pipeline configuration: one JSON document holding every stage's settings.

Example::

    {
      "seed": 7,
      "output_dir": "runs/seed7",
      "benchmark": {"n_sim": 2000, "distortion": "mild"},
      "model": {"input_shape": [1, 64], "blocks_per_scale": [8],
                "condition_per_block": "6xDY + 2xNone", "n_classes": 4},
      "train": {"epochs": 10, "generator": {"lr": 0.0003}},
      "eval": {"n_trees": 50}
    }

Missing sections fall back to defaults; unknown keys are rejected with their
dotted path. The top-level ``seed`` is the master seed and is written into
the benchmark, training and evaluation sections.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import types
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Final, TypeVar, Union, get_args, get_origin, get_type_hints

from evaluation.report import EvalConfig
from flows.checkpoint import canonical_json
from flows.model import ModelSpec
from spectra.benchmark import BenchmarkConfig
from training.trainer import TrainConfig

THREADS_ENV: Final[str] = "FLOWBRIDGE_THREADS"
DEFAULT_OUTPUT_DIR: Final[str] = "runs/default"

T = TypeVar("T")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


def _convert(tp: Any, value: Any, path: str) -> Any:
    if tp is Any:
        return value
    if tp is ModelSpec:
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
        try:
            return ModelSpec.from_dict(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if dataclasses.is_dataclass(tp) and isinstance(tp, type):
        return build_dataclass(tp, value, path)

    origin = get_origin(tp)
    if origin in (Union, types.UnionType):
        args = get_args(tp)
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(f"{path}: value must not be null")
        candidates = [a for a in args if a is not type(None)]
        return _convert(candidates[0], value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], item, f"{path}[{i}]") for i, item in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} values, got {len(value)}")
        return tuple(_convert(a, item, f"{path}[{i}]") for i, (a, item) in enumerate(zip(args, value)))

    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported config type {tp!r}")


def build_dataclass(cls: type[T], data: Any, path: str = "") -> T:
    """Construct a (possibly nested) frozen config dataclass from plain JSON data."""
    label = path or cls.__name__
    if not isinstance(data, dict):
        raise ConfigError(f"{label}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    unknown = sorted(set(data) - known)
    if unknown:
        dotted = ", ".join(f"{path}.{key}" if path else key for key in unknown)
        raise ConfigError(f"unknown config key(s): {dotted}")
    kwargs = {key: _convert(hints[key], value, f"{path}.{key}" if path else key) for key, value in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{label}: {exc}") from exc


@dataclass(frozen=True)
class PipelineConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    # None selects the desk-scale spectral preset sized to the benchmark
    model: ModelSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = DEFAULT_OUTPUT_DIR

    def model_spec(self) -> ModelSpec:
        if self.model is not None:
            return self.model
        return ModelSpec.spectral_desk(self.benchmark.n_classes, self.benchmark.n_wavelengths)

    def with_seed(self, seed: int) -> PipelineConfig:
        return replace(
            self,
            seed=seed,
            benchmark=replace(self.benchmark, seed=seed),
            train=replace(self.train, seed=seed),
            eval=replace(self.eval, seed=seed),
        )

    def with_overrides(self, **train_overrides: Any) -> PipelineConfig:
        return replace(self, train=replace(self.train, **train_overrides))

    def to_dict(self) -> dict[str, Any]:
        payload = dataclasses.asdict(self)
        payload["model"] = None if self.model is None else self.model.to_dict()
        return payload

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> PipelineConfig:
        config = build_dataclass(cls, data)
        return config.with_seed(config.seed) if "seed" in data else config


def load_config(path: Path | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    return PipelineConfig.from_dict(raw)


def config_hash(config: PipelineConfig) -> str:
    return hashlib.sha256(config.to_json().encode("utf-8")).hexdigest()


def worker_count() -> int:
    raw = os.getenv(THREADS_ENV)
    if raw is None or raw.strip() == "":
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value
