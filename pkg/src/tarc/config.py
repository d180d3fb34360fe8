"""Experiment configuration: JSON schema, defaults and validation."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional

from .trainers import Method, MethodError, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    kind: str = "class_il"
    dataset: str = "synthetic"
    num_classes: int = 10
    train_per_class: int = 200
    test_per_class: int = 100
    image_size: int = 28
    classes_per_task: int = 2
    n_tasks: int = 20
    samples_per_task: Optional[int] = None
    test_per_task: Optional[int] = None
    rounds: int = 6
    samples_per_segment: int = 200
    test_per_segment: int = 100


@dataclass
class NetworkSection:
    hidden_dims: Optional[List[int]] = None
    ssl_proj_dim: int = 64
    batch_norm: bool = True


@dataclass
class MetricToggles:
    transfer: bool = True
    ece: bool = True
    corruption: bool = False
    flatness: bool = False
    bias: bool = False
    noisy_label: bool = False
    ece_bins: int = 15
    sigma_grid: List[float] = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0])
    flatness_trials: int = 3
    noise_rates: List[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8])
    probe_epochs: int = 20
    corruption_test_samples: int = 500


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    methods: List[str] = field(default_factory=lambda: ["er"])
    train: TrainConfig = field(default_factory=TrainConfig)
    network: NetworkSection = field(default_factory=NetworkSection)
    metrics: MetricToggles = field(default_factory=MetricToggles)
    output_dir: str = "runs/experiment"
    seeds: List[int] = field(default_factory=lambda: [0])


_SECTIONS = {"scenario": ScenarioConfig, "train": TrainConfig, "network": NetworkSection, "metrics": MetricToggles}


def _check_type(value: Any, hint, path: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_type(value, inner[0], path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        return [_check_type(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {k: _check_type(v, hints[k], f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    data = dict(data)
    if "method" in data:
        if "methods" in data:
            raise ConfigError("config: give either 'method' or 'methods', not both")
        data["methods"] = [data.pop("method")]
    allowed = {f.name for f in dataclasses.fields(ExperimentConfig)}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"config.{key}: unknown key")
    sections = {name: _build(cls, data.get(name, {}), f"config.{name}") for name, cls in _SECTIONS.items()}
    methods = _check_type(data.get("methods", ["er"]), List[str], "config.methods")
    if not methods:
        raise ConfigError("config.methods: at least one method is required")
    for i, m in enumerate(methods):
        try:
            Method.parse(m)
        except MethodError as exc:
            raise ConfigError(f"config.methods[{i}]: {exc}") from None
    seeds = _check_type(data.get("seeds", [0]), List[int], "config.seeds")
    if not seeds:
        raise ConfigError("config.seeds: at least one seed is required")
    cfg = ExperimentConfig(
        scenario=sections["scenario"],
        methods=methods,
        train=sections["train"],
        network=sections["network"],
        metrics=sections["metrics"],
        output_dir=_check_type(data.get("output_dir", "runs/experiment"), str, "config.output_dir"),
        seeds=seeds,
    )
    return resolve(cfg)


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Fill scenario-dependent defaults and check method/scenario compatibility."""
    sc = cfg.scenario
    if sc.kind not in ("class_il", "domain_il", "general_il"):
        raise ConfigError(f"config.scenario.kind: unknown scenario {sc.kind!r}")
    if cfg.network.hidden_dims is None:
        cfg.network.hidden_dims = [256, 256] if sc.kind == "class_il" else [100, 100]
    if sc.kind == "class_il" and sc.num_classes % sc.classes_per_task:
        raise ConfigError("config.scenario.classes_per_task: must divide num_classes")
    if sc.kind == "domain_il":
        if sc.samples_per_task is None:
            sc.samples_per_task = min(500, sc.num_classes * sc.train_per_class)
        if sc.test_per_task is None:
            sc.test_per_task = min(300, sc.num_classes * sc.test_per_class)
    if sc.kind == "general_il" and sc.num_classes != 10:
        raise ConfigError("config.scenario.num_classes: General-IL needs 10 classes")
    for i, m in enumerate(cfg.methods):
        method = Method.parse(m)
        if method.regularizer and sc.kind == "general_il":
            raise ConfigError(f"config.methods[{i}]: {m} is not supported on General-IL")
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def parse_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")
