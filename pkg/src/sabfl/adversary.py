"""Label-flipping workers and colluding validators."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import FrozenSet, Optional, Sequence

import numpy as np

from .chain import RoleAssignment, apply_swaps
from .data import DataShard
from .models import ConfigurationError, ModelSpec, eval_accuracy, eval_loss, local_sgd


def reverse_flip_map(num_classes: int) -> np.ndarray:
    """Default attack permutation l -> C-1-l."""
    return np.arange(num_classes)[::-1].copy()


@dataclass(frozen=True, eq=False)
class AttackConfig:
    malicious_ids: FrozenSet[int] = frozenset()
    flip_map: Optional[np.ndarray] = None
    validators_can_be_malicious: bool = True
    max_malicious_validator_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "malicious_ids", frozenset(int(i) for i in self.malicious_ids))
        if not 0.0 <= self.max_malicious_validator_fraction <= 0.5:
            raise ConfigurationError("malicious validator fraction cap must lie in [0, 0.5]")
        if self.flip_map is not None:
            fm = np.asarray(self.flip_map, dtype=np.int64)
            if fm.ndim != 1 or sorted(fm.tolist()) != list(range(len(fm))):
                raise ConfigurationError("flip_map must be a permutation of 0..C-1")
            object.__setattr__(self, "flip_map", fm)

    def is_malicious(self, pid: int) -> bool:
        return pid in self.malicious_ids

    @property
    def inert(self) -> bool:
        """True when flipping changes nothing, so malicious ids behave honestly."""
        fm = self.flip_map
        return fm is None or bool(np.all(fm == np.arange(len(fm))))


def flip_labels(shard: DataShard, flip_map) -> DataShard:
    """View of ``shard`` whose labels pass through ``flip_map``; the dataset is untouched."""
    fm = np.asarray(flip_map, dtype=np.int64)
    raw = shard.dataset.labels[shard.indices]
    if len(raw) and (raw.min() < 0 or raw.max() >= len(fm)):
        raise ConfigurationError("shard has labels outside the flip map's domain")
    if shard.label_map is not None:
        fm = fm[shard.label_map]
    return dataclasses.replace(shard, label_map=fm)


def malicious_worker_update(spec: ModelSpec, w0, shard: DataShard, flip_map, epochs: int,
                            lr: float, batch_size: int, rng_seed) -> np.ndarray:
    return local_sgd(spec, w0, flip_labels(shard, flip_map), epochs, lr, batch_size, rng_seed)


def malicious_validator_losses(spec: ModelSpec, worker_weights: Sequence[np.ndarray],
                               shard: DataShard, flip_map, metric: str = "loss") -> np.ndarray:
    """One loss-matrix row scored against the flipped labels of the validator's shard."""
    batch = flip_labels(shard, flip_map).as_minibatch()
    fn = eval_accuracy if metric == "accuracy" else eval_loss
    return np.array([fn(spec, w, batch) for w in worker_weights])


def cap_malicious_validators(roles: RoleAssignment, cfg: AttackConfig,
                             rng: np.random.Generator):
    """Swap excess malicious validators with honest workers.

    Returns ``(new_roles, swaps)`` where ``swaps`` lists
    ``(validator_out, worker_in)`` pairs in the order they were applied.
    An inert attack (identity flip map) leaves the roles alone.
    """
    if cfg.inert:
        return roles, ()
    V = len(roles.validators)
    cap = 0
    if cfg.validators_can_be_malicious:
        cap = math.floor(cfg.max_malicious_validator_fraction * V + 1e-9)
    bad = [v for v in roles.validators if cfg.is_malicious(v)]
    excess = len(bad) - cap
    if excess <= 0:
        return roles, ()
    honest_workers = [w for w in roles.workers if not cfg.is_malicious(w)]
    if len(honest_workers) < excess:
        raise ConfigurationError(
            f"need {excess} honest workers to demote malicious validators, "
            f"only {len(honest_workers)} available"
        )
    outs = sorted(bad[i] for i in rng.permutation(len(bad))[:excess])
    ins = sorted(honest_workers[i] for i in rng.permutation(len(honest_workers))[:excess])
    swaps = tuple(zip(outs, ins))
    return apply_swaps(roles, swaps), swaps
