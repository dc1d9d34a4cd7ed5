"""Run configuration: a single versioned JSON file drives every stage.

The config file is the source of truth for reproducibility; environment
variables are consulted only for secrets (the API key). Validation reports
the offending field path before any model traffic happens.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .batching import BatcherConfig
from .distill import DistillConfig
from .errors import ConfigError, InvalidInputError
from .labels import LabelSpace
from .optimizer import OptimizerConfig
from .revision import ReviseConfig
from .task import TaskProfile

CONFIG_VERSION = 1


@dataclass
class GatewaySettings:
    endpoint: str = ""
    api_key_env: str = "RULEBOOK_API_KEY"
    cache_dir: Optional[str] = None
    retries: int = 3
    backoff: float = 0.5
    in_flight: int = 1


@dataclass
class RunConfig:
    space: LabelSpace
    task: TaskProfile
    gateway: GatewaySettings = field(default_factory=GatewaySettings)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    batcher: BatcherConfig = field(default_factory=BatcherConfig)
    revise: ReviseConfig = field(default_factory=ReviseConfig)
    datasets: dict[str, str] = field(default_factory=dict)
    seed: int = 0
    raw: dict = field(default_factory=dict)

    def digest(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _get(data: dict, path: str, default: Any = None) -> Any:
    node: Any = data
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _require(data: dict, path: str) -> Any:
    value = _get(data, path, default=None)
    if value is None:
        raise ConfigError(f"{path}: required field is missing")
    return value


def _apply(target: Any, section: dict, path: str, renames: Optional[dict[str, str]] = None) -> Any:
    renames = renames or {}
    for key, value in section.items():
        attr = renames.get(key, key)
        if not hasattr(target, attr):
            raise ConfigError(f"{path}.{key}: unknown field")
        if attr == "target_labels":
            value = tuple(value)
        setattr(target, attr, value)
    return target


def parse_config(data: dict) -> RunConfig:
    if data.get("config_version") != CONFIG_VERSION:
        raise ConfigError(f"config_version: expected {CONFIG_VERSION}, got {data.get('config_version')!r}")
    labels = _require(data, "labels.names")
    try:
        space = LabelSpace(
            labels=tuple(labels),
            priority=_get(data, "labels.priority", {}) or {},
            aliases=_get(data, "labels.aliases", {}) or {},
        )
    except InvalidInputError as exc:
        raise ConfigError(f"labels: {exc}") from exc
    task_section = _require(data, "task")
    try:
        task = TaskProfile(
            task_framing=task_section["task_framing"],
            input_tag=task_section["input_tag"],
            input_noun=task_section["input_noun"],
            classification_task=task_section["classification_task"],
            task_description=task_section["task_description"],
            abstain_token=task_section.get("abstain_token", "ABSTAIN"),
            evidence_phrase=task_section.get("evidence_phrase", "the evidence excerpt"),
            input_phrase=task_section.get("input_phrase", "the input"),
        )
    except KeyError as exc:
        raise ConfigError(f"task.{exc.args[0]}: required field is missing") from exc

    config = RunConfig(space=space, task=task, raw=data)
    config.seed = int(data.get("seed", 0))
    config.datasets = dict(_get(data, "datasets", {}) or {})
    _apply(config.gateway, _get(data, "gateway", {}) or {}, "gateway")
    _apply(config.optimizer, _get(data, "optimizer", {}) or {}, "optimizer", {"lambda": "sparsity"})
    _apply(config.distill, _get(data, "distill", {}) or {}, "distill")
    _apply(config.batcher, _get(data, "batcher", {}) or {}, "batcher")
    _apply(config.revise, _get(data, "revise", {}) or {}, "revise", {"lambda": "sparsity"})

    try:
        config.optimizer.validate()
        config.distill.validate()
        config.batcher.validate(space)
        config.revise.validate()
    except InvalidInputError as exc:
        raise ConfigError(str(exc)) from exc
    for label in config.revise.target_labels:
        if label not in space.labels:
            raise ConfigError(f"revise.target_labels: unknown label {label!r}")
    if config.gateway.in_flight < 1:
        raise ConfigError("gateway.in_flight: must be >= 1")
    return config


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    config = parse_config(data)
    for name, dataset_path in config.datasets.items():
        resolved = (path.parent / dataset_path) if not Path(dataset_path).is_absolute() else Path(dataset_path)
        if not resolved.exists():
            raise ConfigError(f"datasets.{name}: file not found: {dataset_path}")
        config.datasets[name] = str(resolved)
    return config
