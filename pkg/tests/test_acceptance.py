"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line."""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from sabfl.aggregation import (
    LossMatrix,
    aggregate_krum,
    aggregate_median,
    aggregate_softmax,
    softmax_scores,
)
from sabfl.analysis import (
    TheoryConfig,
    check_softmax_mean_inequality,
    mean_traces,
    quadratic_spec,
    run_oracle_training,
)
from sabfl.chain import (
    apply_swaps,
    elect_roles,
    read_chain,
    sidecar_path,
    validate_chain,
    validate_chain_file,
)
from sabfl.harness import load_matrix, matrix_from_dict, read_csv_rows, run_batch
from sabfl.protocol import StoppingState, run_experiment, update_stopping

from .conftest import tiny_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} | {detail}")
        return ok
    return emit


def test_criterion_1_aggregation_suite(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    problems = []
    for trial in range(1000):
        k = int(rng.integers(1, 10))
        dim = int(rng.integers(1, 9))
        W = rng.normal(size=(k, dim))
        losses = rng.uniform(0, 5, size=(int(rng.integers(1, 4)), k))
        s = softmax_scores(losses.mean(axis=0))
        if abs(s.sum() - 1.0) > 1e-12:
            problems.append(f"sum {trial}")
        grid = np.round(losses.mean(axis=0) * 2 ** 20) / 2 ** 20
        if softmax_scores(grid).tobytes() != softmax_scores(grid + float(rng.integers(-99, 99))).tobytes():
            problems.append(f"shift {trial}")
        ids = tuple(int(i) for i in rng.permutation(40)[:k])
        agg, scores = aggregate_softmax(list(W), LossMatrix(losses, tuple(range(len(losses))), ids))
        if np.any(agg < W.min(axis=0) - 1e-12) or np.any(agg > W.max(axis=0) + 1e-12):
            problems.append(f"hull {trial}")
        perm = rng.permutation(k)
        agg_p, scores_p = aggregate_softmax(
            list(W[perm]), LossMatrix(losses[:, perm], tuple(range(len(losses))), tuple(ids[i] for i in perm)))
        if agg_p.tobytes() != agg.tobytes() or not np.array_equal(scores_p, scores[perm]):
            problems.append(f"perm {trial}")
        # sort oracle for the median
        cols = np.sort(W, axis=0)
        mid = cols[k // 2] if k % 2 else (cols[k // 2 - 1] + cols[k // 2]) / 2
        if not np.array_equal(aggregate_median(list(W)), mid):
            problems.append(f"median {trial}")
        # exhaustive oracle for Krum
        if k >= 3:
            f = int(rng.integers(0, k - 2))
            best = []
            for i in range(k):
                d = sorted(float(((W[i] - W[j]) ** 2).sum()) for j in range(k) if j != i)
                best.append(math.fsum(d[: k - f - 2]))
            _, idx = aggregate_krum(list(W), f)
            if not math.isclose(best[idx], min(best), rel_tol=1e-12, abs_tol=1e-12):
                problems.append(f"krum {trial}")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 10
    verdict(1, ok, f"1000 instances, {len(problems)} violations, {elapsed:.1f}s (limit 10s)")
    assert ok, problems[:10]


def test_criterion_2_softmax_mean_inequalities(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = math.inf
    for _ in range(10_000):
        x = rng.normal(scale=rng.uniform(0.01, 20), size=int(rng.integers(1, 17)))
        r = check_softmax_mean_inequality(x)
        worst = min(worst, r.upper_margin, r.lower_margin)
    equal_worst = 0.0
    for _ in range(1000):
        x = np.full(int(rng.integers(1, 17)), rng.normal(scale=10))
        r = check_softmax_mean_inequality(x)
        equal_worst = max(equal_worst, abs(r.upper_margin), abs(r.lower_margin))
    elapsed = time.perf_counter() - t0
    ok = worst >= -1e-12 and equal_worst < 1e-12 and elapsed < 5
    verdict(2, ok, f"min margin {worst:.3e}, equality |margin| {equal_worst:.3e}, {elapsed:.1f}s (limit 5s)")
    assert ok


def test_criterion_3_convergence_bound(verdict):
    t0 = time.perf_counter()
    cfg = TheoryConfig(L=1.0, delta=0.01, M=0.1, E=1, K=5, V=3, R=1000)
    spec = quadratic_spec(10, 0)
    trace = mean_traces(run_oracle_training(spec, cfg, s) for s in range(20))
    elapsed = time.perf_counter() - t0
    bound_ok = all(trace.cum_lhs[R - 1] <= trace.rhs[R - 1] for R in (10, 100, 1000))
    ratio = trace.normalized[999] / trace.normalized[9]
    ok = bound_ok and ratio < 0.1 and elapsed < 120
    detail = ", ".join(f"R={R}: {trace.cum_lhs[R - 1]:.4f} <= {trace.rhs[R - 1]:.2f}"
                       for R in (10, 100, 1000))
    verdict(3, ok, f"bound {'holds' if bound_ok else 'VIOLATED'} ({detail}); "
                   f"normalized R=1000 / R=10 = {ratio:.3f} (need < 0.1); {elapsed:.1f}s")
    assert bound_ok, "bound violated"
    assert ratio < 0.1, f"normalized average only fell to {ratio:.3f} of its R=10 value"


@pytest.fixture(scope="module")
def attack_matrix(tmp_path_factory):
    out = tmp_path_factory.mktemp("attack")
    t0 = time.perf_counter()
    run_batch(load_matrix(CONFIGS / "attack_defense.toml"), out)
    elapsed = time.perf_counter() - t0
    rows = {r["experiment"]: r for r in read_csv_rows(out / "comparison.csv")}
    table = {e: {m: float(v) for m, v in r.items()
                 if m not in ("experiment", "variant", "num_participants", "num_malicious") and v}
             for e, r in rows.items()}
    return table, elapsed


def test_criterion_4_attack_defense_ordering(verdict, attack_matrix):
    table, elapsed = attack_matrix
    att, clean = table["flip8"], table["flip0"]
    s = att["softmax"]
    beats = {m: s > att[m] for m in ("median", "vanilla", "simple")}
    gap = clean["softmax"] - s
    ok = all(beats.values()) and gap <= 0.03 and elapsed < 900
    accs = ", ".join(f"{m} {v:.4f}" for m, v in att.items())
    verdict(4, ok, f"8 flippers: {accs}; attack-free softmax {clean['softmax']:.4f}, "
                   f"gap {100 * gap:.2f} pts (limit 3); matrix {elapsed:.0f}s (limit 900s)")
    assert ok


def test_criterion_5_no_attack_sanity(verdict, attack_matrix):
    table, elapsed = attack_matrix
    clean = table["flip0"]
    s, v, si = clean["softmax"], clean["vanilla"], clean["simple"]
    ok = abs(s - v) <= 0.02 and s >= si - 0.01 and elapsed < 900
    verdict(5, ok, f"softmax {s:.4f}, vanilla {v:.4f} (|diff| {100 * abs(s - v):.2f} pts, limit 2), "
                   f"simple {si:.4f} (need softmax >= simple - 1 pt)")
    assert ok


def test_criterion_6_chain_integrity(verdict, tmp_path):
    t0 = time.perf_counter()
    cfg = tiny_config(max_rounds=100, stopping_window=200, attack={"num_malicious": 3})
    run_experiment(cfg, tmp_path)
    path = tmp_path / "chain.jsonl"
    chain = read_chain(path)
    valid = bool(validate_chain(chain)) and len(chain) == 100

    g = chain.genesis
    rederived = all(apply_swaps(elect_roles(g.ledger, b.round, b.prev_hash, g.K, g.V), b.swaps) == b.roles
                    for b in chain.blocks)
    swapped_rounds = sum(1 for b in chain.blocks if b.swaps)

    rng = np.random.default_rng(606)
    text = path.read_bytes()
    side = sidecar_path(path)
    weights = side.read_bytes()
    line_starts = [0] + [i + 1 for i, c in enumerate(text) if c == ord("\n")][:-1]
    line_ends = [i for i, c in enumerate(text) if c == ord("\n")]
    targets = []
    for start, end in zip(line_starts, line_ends):  # genesis plus 100 block lines
        targets += [(path, int(p)) for p in rng.integers(start, end + 1, size=3)]
    # sidecar: three positions inside every block's contiguous weight region
    offset = 8 * g.initial_weight.size
    for b in chain.blocks:
        size = 8 * (sum(w.size for w in b.worker_weights.values()) + b.global_weight.size)
        targets += [(side, int(p)) for p in rng.integers(offset, offset + size, size=3)]
        offset += size
    missed = []
    originals = {path: text, side: weights}
    for target, pos in targets:
        data = bytearray(originals[target])
        data[pos] ^= 1 << int(rng.integers(0, 8))
        target.write_bytes(bytes(data))
        if validate_chain_file(path):
            missed.append((target.name, pos))
        target.write_bytes(originals[target])
    restored = bool(validate_chain_file(path))
    elapsed = time.perf_counter() - t0
    ok = valid and rederived and not missed and restored and elapsed < 60
    verdict(6, ok, f"100 blocks valid={valid}, roles re-derived={rederived} ({swapped_rounds} rounds with "
                   f"validator swaps), {len(targets) - len(missed)}/{len(targets)} byte flips detected, "
                   f"{elapsed:.1f}s (limit 60s)")
    assert ok, missed[:10]


def test_criterion_7_stopping_rule(verdict):
    s = StoppingState()
    for a in [0.5, 0.6, 0.7, 0.7, 0.7, 0.65]:
        s = update_stopping(s, a, 3)
        if s.stopped:
            break
    ok = s.stopped_at == 6 and s.final_accuracy == 0.7
    verdict(7, ok, f"T={s.stopped_at}, final accuracy {s.final_accuracy}, "
                   f"k={[round(k, 4) for k in s.k_values]}")
    assert ok


def test_criterion_8_determinism(verdict, tmp_path):
    raw = {
        "repeats": 2,
        "base": {"num_participants": 8, "K": 5, "V": 2, "epochs": 2, "lr": 0.1, "batch_size": 16,
                 "max_rounds": 6, "stake_mode": "uniform",
                 "data": {"num_train": 600, "num_test": 200, "input_dim": 5, "num_classes": 3},
                 "partition": {"lambda": 0.1, "min_shard_size": 20}},
        "cells": [{"label": "det", "experiment": "det", "variant": "HH",
                   "aggregators": ["softmax", "vanilla", "median", "krum"],
                   "attack": {"num_malicious": 2}}],
    }
    first = run_batch(matrix_from_dict(raw), tmp_path / "a", seed=5)
    second = run_batch(matrix_from_dict(raw), tmp_path / "b", seed=5)
    same_csv = (tmp_path / "a" / "comparison.csv").read_bytes() == \
        (tmp_path / "b" / "comparison.csv").read_bytes()
    heads = lambda runs: [s["chain_head"] for s in runs]
    same_heads = heads(first) == heads(second)
    chain_bytes = all(
        (tmp_path / "a" / p.relative_to(tmp_path / "b")).read_bytes() == p.read_bytes()
        for p in (tmp_path / "b").rglob("chain.jsonl*"))
    ok = same_csv and same_heads and chain_bytes
    verdict(8, ok, f"comparison.csv identical={same_csv}, {len(first)} chain heads identical={same_heads}, "
                   f"chain files identical={chain_bytes}")
    assert ok
