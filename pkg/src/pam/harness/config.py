"""Run configuration: dataclasses, file loading and environment overrides.

Config files are YAML or JSON with the keys of :class:`RunConfig`; training
options live under ``train:`` (keys of :class:`pam.trainer.TrainConfig`).
``PAM_DATA_ROOT`` and ``PAM_OUTPUT_ROOT`` override ``data_root`` and
``output_root``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from ..errors import ConfigurationError
from ..router import STRATEGIES
from ..trainer import TrainConfig

METHODS = ("pam", "finetune")


@dataclass
class RunConfig:
    name: str = "run"
    method: str = "pam"
    dataset: str = "cifar10"
    dataset_args: dict[str, Any] = field(default_factory=dict)  # extra loader kwargs
    data_root: Optional[str] = None
    download: bool = False
    base_classes: int = 0
    increment: int = 2
    per_class_train: Optional[int] = None
    per_class_test: Optional[int] = None
    variant: str = "rn18"
    weights: Optional[str] = None  # None: random init (tests / offline proxies only)
    image_size: Optional[int] = None
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    strategy: str = "confidence"
    ensemble_w: Optional[float] = None
    eval_strategies: list[str] = field(default_factory=list)
    eval_ensemble_w: list[float] = field(default_factory=list)
    test_batch_size: int = 48
    cache_features: bool = True
    deterministic: bool = True
    output_root: str = "runs"

    def __post_init__(self) -> None:
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}")
        for s in [self.strategy, *self.eval_strategies]:
            if s not in STRATEGIES:
                raise ConfigurationError(f"unknown strategy {s!r}")
        if self.increment < 1:
            raise ConfigurationError("increment must be >= 1")
        if self.test_batch_size < 1:
            raise ConfigurationError("test_batch_size must be >= 1")

    @property
    def run_dir(self) -> Path:
        return Path(self.output_root) / self.name

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes: Any) -> "RunConfig":
        train_changes = {k[len("train."):]: v for k, v in changes.items() if k.startswith("train.")}
        top = {k: v for k, v in changes.items() if not k.startswith("train.")}
        if train_changes:
            top["train"] = dataclasses.replace(self.train, **train_changes)
        return dataclasses.replace(self, **top)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "train" in d and isinstance(d["train"], dict):
            tknown = {f.name for f in dataclasses.fields(TrainConfig)}
            bad = set(d["train"]) - tknown
            if bad:
                raise ConfigurationError(f"unknown train keys {sorted(bad)}")
            d["train"] = TrainConfig(**d["train"])
        return cls(**d)


def apply_env(cfg: RunConfig) -> RunConfig:
    changes = {}
    if os.environ.get("PAM_DATA_ROOT"):
        changes["data_root"] = os.environ["PAM_DATA_ROOT"]
    if os.environ.get("PAM_OUTPUT_ROOT"):
        changes["output_root"] = os.environ["PAM_OUTPUT_ROOT"]
    if os.environ.get("PAM_WEIGHTS"):
        changes["weights"] = os.environ["PAM_WEIGHTS"]
    return cfg.replace(**changes) if changes else cfg


def load_config(path: Union[str, Path], env: bool = True) -> RunConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    cfg = RunConfig.from_dict(data)
    return apply_env(cfg) if env else cfg


def parse_override(item: str) -> tuple[str, Any]:
    """``key=value`` with the value parsed as YAML (so numbers, null, lists work)."""
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def dump_config(cfg: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
