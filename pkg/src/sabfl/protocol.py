"""Round driver: election, local training, validator scoring, aggregation, block append."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .adversary import (
    AttackConfig,
    cap_malicious_validators,
    malicious_validator_losses,
    malicious_worker_update,
    reverse_flip_map,
)
from .aggregation import LossMatrix
from .chain import (
    Block,
    Chain,
    Genesis,
    ProtocolFault,
    RoleAssignment,
    StakeLedger,
    build_block,
    elect_roles,
    write_chain,
)
from .config import RunConfig
from .data import (
    Dataset,
    DataShard,
    PartitionConfig,
    generate_synthetic,
    load_csv,
    load_idx,
    partition,
    train_test_split,
)
from .models import (
    ConfigurationError,
    ModelSpec,
    eval_accuracy,
    eval_loss,
    init_params,
    local_sgd,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StoppingState:
    accuracies: Tuple[float, ...] = ()
    k_values: Tuple[float, ...] = ()
    stopped_at: Optional[int] = None
    final_accuracy: Optional[float] = None

    @property
    def stopped(self) -> bool:
        return self.stopped_at is not None


def update_stopping(s: StoppingState, new_accuracy: float, W: int) -> StoppingState:
    """Append one test accuracy and apply the trailing-window min/max rule.

    From round W on, k_i = min/max of the last W accuracies (1 if the max is
    0). The run stops the first time k_i drops below k_{i-1}; the final
    accuracy is the best accuracy seen up to and including that round.
    """
    if s.stopped:
        raise ValueError("stopping rule already fired")
    acc = s.accuracies + (float(new_accuracy),)
    i = len(acc)
    k_values = s.k_values
    stopped_at = None
    final = None
    if i >= W:
        window = acc[-W:]
        hi = max(window)
        k = 1.0 if hi == 0 else min(window) / hi
        if k_values and k < k_values[-1]:
            stopped_at = i
            final = max(acc)
        k_values = k_values + (k,)
    return StoppingState(acc, k_values, stopped_at, final)


@dataclass
class RoundReport:
    round: int
    roles: RoleAssignment
    scores: np.ndarray
    test_accuracy: float
    global_loss: float
    wall_time: float
    batch_clamped: bool = False
    swaps: Tuple[Tuple[int, int], ...] = ()


@dataclass
class RunReport:
    config: RunConfig
    rounds: List[RoundReport]
    stopping: StoppingState
    final_accuracy: float
    chain_head: str
    fault: Optional[str] = None
    meta: Dict[str, object] = field(default_factory=dict)

    def summary(self) -> Dict[str, object]:
        cfg = self.config
        s = self.stopping
        out = {
            **self.meta,
            "aggregator": cfg.aggregator,
            "seed": cfg.seed,
            "lambda": cfg.partition.lam,
            "num_participants": cfg.num_participants,
            "num_malicious": (len(cfg.attack.malicious_ids) if cfg.attack.malicious_ids
                              is not None else cfg.attack.num_malicious),
            "rounds": len(self.rounds),
            "stopped_at": s.stopped_at,
            "final_accuracy": self.final_accuracy,
            "last_accuracy": s.accuracies[-1] if s.accuracies else None,
            "chain_head": self.chain_head,
            "fault": self.fault,
            "config": cfg.to_dict(),
        }
        return out


def load_datasets(cfg: RunConfig) -> Tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "synthetic":
        full = generate_synthetic(d.num_train + d.num_test, d.input_dim, d.num_classes,
                                  d.class_separation, d.seed)
        return train_test_split(full, d.num_test, d.seed + 1)
    if d.source == "idx":
        train = load_idx(d.train_images, d.train_labels, "train")
        test = load_idx(d.test_images, d.test_labels, "test")
    else:
        train = load_csv(d.train_csv, None, "train")
        test = load_csv(d.test_csv, train.num_classes, "test")
    c = max(train.num_classes, test.num_classes)
    return replace(train, num_classes=c), replace(test, num_classes=c)


class Simulation:
    """Everything a run needs: data, shards, stakes, attack setup and the chain."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.train, self.test = load_datasets(cfg)
        c = self.train.num_classes
        if cfg.model.kind == "mlp":
            self.spec = ModelSpec("mlp", self.train.input_dim, c, cfg.model.hidden_dim)
        else:
            self.spec = ModelSpec("logistic_regression", self.train.input_dim, c)
        pcfg = PartitionConfig(cfg.partition.lam, cfg.num_participants, cfg.partition.seed,
                               cfg.min_shard_size)
        self.shards: List[DataShard] = partition(self.train, pcfg)
        self.batches = {s.owner: s.as_minibatch() for s in self.shards}
        self.test_batch = self.test.as_minibatch()

        a = cfg.attack
        if a.malicious_ids is not None:
            bad = [int(i) for i in a.malicious_ids]
        else:
            rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xBAD]))
            bad = sorted(int(i) for i in rng.choice(cfg.num_participants, a.num_malicious,
                                                    replace=False))
        flip = reverse_flip_map(c) if a.flip == "reverse" else np.asarray(a.flip)
        self.attack = AttackConfig(frozenset(bad), flip, a.validators_can_be_malicious,
                                   a.max_malicious_validator_fraction)
        if cfg.stake_mode == "data_size":
            stakes = {s.owner: float(len(s)) for s in self.shards}
        else:
            stakes = {s.owner: 1.0 for s in self.shards}
        self.ledger = StakeLedger(stakes)
        genesis = Genesis(self.spec.shape_tag, init_params(self.spec, cfg.seed), stakes,
                          cfg.K, cfg.V)
        self.chain = Chain(genesis)
        self._pool = (ThreadPoolExecutor(cfg.parallel_workers)
                      if cfg.parallel_workers > 1 else None)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()

    def shard(self, pid: int) -> DataShard:
        return self.shards[pid]


def _train_worker(sim: Simulation, wid: int, w_global, r: int, alpha: float):
    cfg = sim.cfg
    seed = np.random.SeedSequence([cfg.seed, r, wid])
    shard = sim.shard(wid)
    if sim.attack.is_malicious(wid):
        return malicious_worker_update(sim.spec, w_global, shard, sim.attack.flip_map,
                                       cfg.epochs, alpha, cfg.batch_size, seed)
    return local_sgd(sim.spec, w_global, shard, cfg.epochs, alpha, cfg.batch_size, seed)


def run_round(sim: Simulation) -> Tuple[Block, RoundReport]:
    """Execute one full round and append its block.

    Any failure raises before the append, so the chain is left unchanged.
    """
    t0 = time.perf_counter()
    cfg, chain = sim.cfg, sim.chain
    r, prev = chain.next_round, chain.head_hash
    w_global = chain.head_weight
    try:
        elected = elect_roles(sim.ledger, r, prev, cfg.K, cfg.V)
        cap_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r, 0xCA9]))
        roles, swaps = cap_malicious_validators(elected, sim.attack, cap_rng)
        alpha = cfg.alpha(r)
        workers = list(roles.workers)
        if sim._pool is not None:
            # results come back in submission order, so parallelism cannot reorder the merge
            weights = list(sim._pool.map(lambda w: _train_worker(sim, w, w_global, r, alpha),
                                         workers))
        else:
            weights = [_train_worker(sim, w, w_global, r, alpha) for w in workers]

        metric = "accuracy" if cfg.aggregator == "softmax_accuracy" else "loss"
        rows = []
        for vid in roles.validators:
            shard = sim.shard(vid)
            if sim.attack.is_malicious(vid):
                rows.append(malicious_validator_losses(sim.spec, weights, shard,
                                                       sim.attack.flip_map, metric))
            else:
                batch = sim.batches[vid]
                fn = eval_accuracy if metric == "accuracy" else eval_loss
                rows.append(np.array([fn(sim.spec, w, batch) for w in weights]))
        matrix = LossMatrix(np.vstack(rows), roles.validators, tuple(workers))
        block = build_block(
            r, prev, roles, dict(zip(workers, weights)), matrix,
            aggregator=cfg.aggregator, krum_f=cfg.effective_krum_f,
            sample_sizes={w: len(sim.shard(w)) for w in workers}, swaps=swaps,
        )
        chain.append(block)
    except ConfigurationError as exc:
        raise ProtocolFault("round-aborted", str(exc)) from exc

    accuracy = eval_accuracy(sim.spec, block.global_weight, sim.test_batch)
    loss = eval_loss(sim.spec, block.global_weight, sim.test_batch)
    clamped = any(cfg.batch_size > len(sim.shard(w)) for w in workers)
    report = RoundReport(r, roles, block.scores, accuracy, loss,
                         time.perf_counter() - t0, clamped, swaps)
    return block, report


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


def run_experiment(cfg: RunConfig, out_dir=None, meta: Optional[Dict[str, object]] = None,
                   sim: Optional[Simulation] = None) -> RunReport:
    """Run rounds until the stopping rule fires or ``max_rounds`` is reached.

    With ``out_dir`` set, writes ``chain.jsonl`` (+ weight sidecar),
    ``rounds.csv`` and ``summary.json`` there.
    """
    sim = sim or Simulation(cfg)
    state = StoppingState()
    reports: List[RoundReport] = []
    fault = None
    try:
        for _ in range(cfg.max_rounds):
            try:
                _, rep = run_round(sim)
            except ProtocolFault as exc:
                fault = str(exc)
                log.warning("round %d aborted: %s", sim.chain.next_round, exc)
                break
            reports.append(rep)
            state = update_stopping(state, rep.test_accuracy, cfg.stopping_window)
            if state.stopped:
                break
    finally:
        sim.close()

    if state.stopped:
        final = state.final_accuracy
    else:
        final = max(state.accuracies) if state.accuracies else 0.0
    report = RunReport(cfg, reports, state, final, sim.chain.head_hash.hex(), fault,
                       dict(meta or {}))
    if out_dir is not None:
        write_run(report, sim.chain, out_dir)
    return report


def write_run(report: RunReport, chain: Chain, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_chain(chain, out / "chain.jsonl")
    k_by_round = {}
    W = report.config.stopping_window
    for offset, k in enumerate(report.stopping.k_values):
        k_by_round[W + offset] = k
    with open(out / "rounds.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["round", "accuracy", "loss", "k_value"])
        for rep in report.rounds:
            writer.writerow([rep.round, _fmt(rep.test_accuracy), _fmt(rep.global_loss),
                             _fmt(k_by_round.get(rep.round))])
    with open(out / "summary.json", "w") as fh:
        json.dump(report.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
