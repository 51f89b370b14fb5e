"""Run configuration and its TOML file form.

A run config is a flat TOML document with four optional tables::

    seed = 0
    num_participants = 20
    K = 16
    V = 3
    epochs = 4
    lr = 0.01
    lr_decay = 0.0          # alpha_r = lr / (1 + lr_decay * (r - 1))
    batch_size = 32
    stopping_window = 30
    max_rounds = 200
    aggregator = "softmax"  # softmax | softmax_accuracy | vanilla | simple | median | krum
    krum_f = 6              # omit for (K - 3) // 2
    stake_mode = "data_size"  # or "uniform"
    parallel_workers = 1

    [model]
    kind = "logistic_regression"   # or "mlp"
    hidden_dim = 16

    [data]
    source = "synthetic"    # synthetic | idx | csv
    num_train = 5000
    num_test = 1000
    input_dim = 20
    num_classes = 4
    class_separation = 2.0
    seed = 0
    # idx: train_images, train_labels, test_images, test_labels
    # csv: train_csv, test_csv

    [partition]
    lambda = 1.0
    min_shard_size = 64     # omit for 2 * batch_size
    seed = 0

    [attack]
    num_malicious = 0       # or malicious_ids = [..]
    flip = "reverse"        # or an explicit permutation list
    validators_can_be_malicious = true
    max_malicious_validator_fraction = 0.5
"""
from __future__ import annotations

import copy
import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .aggregation import AGGREGATORS
from .models import ConfigurationError


@dataclass
class ModelConfig:
    kind: str = "logistic_regression"
    hidden_dim: int = 16


@dataclass
class DataConfig:
    source: str = "synthetic"
    num_train: int = 5000
    num_test: int = 1000
    input_dim: int = 20
    num_classes: int = 4
    class_separation: float = 2.0
    seed: int = 0
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    train_csv: Optional[str] = None
    test_csv: Optional[str] = None


@dataclass
class PartitionSection:
    lam: float = 1.0
    min_shard_size: Optional[int] = None
    seed: int = 0


@dataclass
class AttackSection:
    num_malicious: int = 0
    malicious_ids: Optional[List[int]] = None
    flip: Union[str, List[int]] = "reverse"
    validators_can_be_malicious: bool = True
    max_malicious_validator_fraction: float = 0.5


@dataclass
class RunConfig:
    seed: int = 0
    num_participants: int = 20
    K: int = 16
    V: int = 3
    epochs: int = 4
    lr: float = 0.01
    lr_decay: float = 0.0
    batch_size: int = 32
    stopping_window: int = 30
    max_rounds: int = 200
    aggregator: str = "softmax"
    krum_f: Optional[int] = None
    stake_mode: str = "data_size"
    parallel_workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionSection = field(default_factory=PartitionSection)
    attack: AttackSection = field(default_factory=AttackSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.K + self.V + 1 != self.num_participants:
            raise ConfigurationError(
                f"K + V + 1 = {self.K + self.V + 1} but num_participants = {self.num_participants}"
            )
        if self.K < 1 or self.V < 1:
            raise ConfigurationError("K and V must be >= 1")
        if self.stopping_window < 2:
            raise ConfigurationError("stopping_window must be >= 2")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not self.lr > 0 or self.lr_decay < 0:
            raise ConfigurationError("lr must be positive and lr_decay non-negative")
        if self.batch_size < 1 or self.max_rounds < 1:
            raise ConfigurationError("batch_size and max_rounds must be >= 1")
        if self.aggregator not in AGGREGATORS:
            raise ConfigurationError(f"aggregator must be one of {', '.join(AGGREGATORS)}")
        if self.aggregator == "krum" and self.K < self.effective_krum_f + 3:
            raise ConfigurationError("krum needs K >= krum_f + 3")
        if self.stake_mode not in ("data_size", "uniform"):
            raise ConfigurationError("stake_mode must be 'data_size' or 'uniform'")
        if self.model.kind not in ("logistic_regression", "mlp"):
            raise ConfigurationError("model.kind must be logistic_regression or mlp")
        if self.data.source not in ("synthetic", "idx", "csv"):
            raise ConfigurationError("data.source must be synthetic, idx or csv")
        a = self.attack
        n_bad = len(a.malicious_ids) if a.malicious_ids is not None else a.num_malicious
        if not 0 <= n_bad < self.num_participants:
            raise ConfigurationError("malicious count must be in [0, num_participants)")
        if not 0 <= a.max_malicious_validator_fraction <= 0.5:
            raise ConfigurationError("max_malicious_validator_fraction must lie in [0, 0.5]")

    @property
    def effective_krum_f(self) -> int:
        return self.krum_f if self.krum_f is not None else max(0, (self.K - 3) // 2)

    @property
    def min_shard_size(self) -> int:
        m = self.partition.min_shard_size
        return m if m is not None else 2 * self.batch_size

    def alpha(self, r: int) -> float:
        return self.lr / (1.0 + self.lr_decay * (r - 1))

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with every seed shifted to ``seed``-relative values."""
        out = copy.deepcopy(self)
        offset = seed - self.seed
        out.seed = seed
        out.data.seed += offset
        out.partition.seed += offset
        return out

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d["partition"]["lambda"] = d["partition"].pop("lam")
        return _drop_none(d)


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


_SECTIONS = {"model": ModelConfig, "data": DataConfig, "partition": PartitionSection,
             "attack": AttackSection}


def _build(cls, raw: Dict[str, Any], where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    return cls(**raw)


def config_from_dict(raw: Dict[str, Any]) -> RunConfig:
    raw = copy.deepcopy(raw)
    sections = {}
    for name, cls in _SECTIONS.items():
        section = raw.pop(name, {})
        if not isinstance(section, dict):
            raise ConfigurationError(f"[{name}] must be a table")
        if name == "partition" and "lambda" in section:
            section["lam"] = section.pop("lambda")
        sections[name] = _build(cls, section, f"[{name}]")
    known = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTIONS)
    unknown = set(raw) - known
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    try:
        return RunConfig(**raw, **sections)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc


def read_toml(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except FileNotFoundError:
        raise
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def load_config(path) -> RunConfig:
    return config_from_dict(read_toml(path))


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out
