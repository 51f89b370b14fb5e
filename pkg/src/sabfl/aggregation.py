"""Aggregation rules for worker weight vectors.

Every rule sums in a fixed order (ascending worker id for the softmax
family, input order elsewhere) with plain sequential accumulation, so a
verifier recomputing an aggregate gets the same bits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .models import ConfigurationError

AGGREGATORS = ("softmax", "softmax_accuracy", "vanilla", "simple", "median", "krum")


@dataclass(frozen=True, eq=False)
class LossMatrix:
    """Entry (j, i) is validator j's metric for worker i's weights.

    The same container carries accuracies for the accuracy-based variant.
    """

    entries: np.ndarray
    validator_ids: Tuple[int, ...]
    worker_ids: Tuple[int, ...]

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2 or e.shape[0] < 1 or e.shape[1] < 1:
            raise ConfigurationError("loss matrix must be a non-empty V x K matrix")
        if e.shape != (len(self.validator_ids), len(self.worker_ids)):
            raise ConfigurationError(
                f"loss matrix shape {e.shape} does not match "
                f"{len(self.validator_ids)} validators x {len(self.worker_ids)} workers"
            )
        if not np.all(np.isfinite(e)):
            raise ConfigurationError("loss matrix has non-finite entries")
        object.__setattr__(self, "entries", e)
        object.__setattr__(self, "validator_ids", tuple(int(v) for v in self.validator_ids))
        object.__setattr__(self, "worker_ids", tuple(int(w) for w in self.worker_ids))

    def canonical(self) -> "LossMatrix":
        """Rows and columns reordered by ascending participant id."""
        rows = np.argsort(self.validator_ids, kind="stable")
        cols = np.argsort(self.worker_ids, kind="stable")
        return LossMatrix(
            self.entries[np.ix_(rows, cols)],
            tuple(self.validator_ids[r] for r in rows),
            tuple(self.worker_ids[c] for c in cols),
        )


def mean_loss(L: LossMatrix) -> np.ndarray:
    """Per-worker mean over validators, accumulated in ascending validator id order."""
    order = np.argsort(L.validator_ids, kind="stable")
    total = np.zeros(L.entries.shape[1])
    for j in order:
        total = total + L.entries[j]
    return total / len(order)


def softmax_scores(losses) -> np.ndarray:
    """softmax(-losses) with max-shift stabilisation."""
    v = np.asarray(losses, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ConfigurationError("need a non-empty loss vector")
    if not np.all(np.isfinite(v)):
        raise ConfigurationError("losses must be finite")
    shifted = -(v - v.min())
    e = np.exp(shifted)
    total = 0.0
    for x in e:
        total += x
    return e / total


def _stack(weights: Sequence[np.ndarray]) -> np.ndarray:
    if len(weights) == 0:
        raise ConfigurationError("nothing to aggregate")
    arrays = [np.asarray(w, dtype=np.float64) for w in weights]
    shape = arrays[0].shape
    if len(shape) != 1 or any(a.shape != shape for a in arrays):
        raise ConfigurationError("all weight vectors must share one shape")
    return np.stack(arrays)


def weighted_sum(weights: Sequence[np.ndarray], coefficients) -> np.ndarray:
    W = _stack(weights)
    coefficients = np.asarray(coefficients, dtype=np.float64)
    if coefficients.shape != (W.shape[0],):
        raise ConfigurationError("one coefficient per weight vector required")
    out = np.zeros(W.shape[1])
    for c, w in zip(coefficients, W):
        out = out + c * w
    return out


def _score_and_combine(weights, matrix: LossMatrix, sign: float):
    if len(weights) != len(matrix.worker_ids):
        raise ConfigurationError(
            f"{len(weights)} weight vectors for {len(matrix.worker_ids)} workers"
        )
    order = np.argsort(matrix.worker_ids, kind="stable")
    canon = matrix.canonical()
    scores = softmax_scores(sign * mean_loss(canon))
    aggregate = weighted_sum([weights[i] for i in order], scores)
    # hand scores back aligned with the caller's worker order
    aligned = np.empty_like(scores)
    aligned[order] = scores
    return aggregate, aligned


def aggregate_softmax(weights: Sequence[np.ndarray], L: LossMatrix):
    """Weighted average with coefficients softmax(-mean validator loss).

    Returns ``(aggregate, scores)``; scores follow the order of ``weights``.
    """
    return _score_and_combine(weights, L, 1.0)


def aggregate_softmax_accuracy(weights: Sequence[np.ndarray], A: LossMatrix):
    # exp(+accuracy): better models must earn larger coefficients
    return _score_and_combine(weights, A, -1.0)


def aggregate_vanilla(weights: Sequence[np.ndarray], sample_sizes) -> np.ndarray:
    sizes = np.asarray(sample_sizes, dtype=np.float64)
    if sizes.shape != (len(weights),) or np.any(sizes < 0) or sizes.sum() <= 0:
        raise ConfigurationError("need one non-negative sample size per worker, not all zero")
    return weighted_sum(weights, sizes / sizes.sum())


def aggregate_simple(weights: Sequence[np.ndarray]) -> np.ndarray:
    W = _stack(weights)
    out = np.zeros(W.shape[1])
    for w in W:
        out = out + w
    return out / W.shape[0]


def aggregate_median(weights: Sequence[np.ndarray]) -> np.ndarray:
    """Coordinate-wise median; even counts average the two middle values."""
    W = np.sort(_stack(weights), axis=0)
    k = W.shape[0]
    if k % 2:
        return W[k // 2].copy()
    return (W[k // 2 - 1] + W[k // 2]) / 2.0


def krum_scores(weights: Sequence[np.ndarray], f: int) -> np.ndarray:
    W = _stack(weights)
    k = W.shape[0]
    if f < 0 or k < f + 3:
        raise ConfigurationError(f"Krum needs K >= f + 3 (K={k}, f={f})")
    diffs = W[:, None, :] - W[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diffs, diffs)
    m = k - f - 2
    scores = np.empty(k)
    for i in range(k):
        others = np.delete(dist[i], i)
        scores[i] = np.sort(others)[:m].sum()
    return scores


def aggregate_krum(weights: Sequence[np.ndarray], f: int) -> Tuple[np.ndarray, int]:
    """Return the vector with the smallest summed squared distance to its K-f-2 nearest peers."""
    scores = krum_scores(weights, f)
    chosen = int(np.argmin(scores))
    return np.asarray(weights[chosen], dtype=np.float64).copy(), chosen


def softmax_weighted_mean(x) -> float:
    """sum_i softmax(x)_i * x_i, evaluated stably."""
    x = np.asarray(x, dtype=np.float64)
    return float(softmax_scores(-x) @ x)


def log_sum_exp(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    m = float(x.max())
    return m + math.log(float(np.exp(x - m).sum()))


def aggregate(name: str, weights: List[np.ndarray], matrix: LossMatrix = None,
              sample_sizes=None, krum_f: int = 0):
    """Dispatch by aggregator name; returns ``(aggregate, scores_or_None, krum_index_or_None)``."""
    if name == "softmax":
        agg, scores = aggregate_softmax(weights, matrix)
        return agg, scores, None
    if name == "softmax_accuracy":
        agg, scores = aggregate_softmax_accuracy(weights, matrix)
        return agg, scores, None
    if name == "vanilla":
        return aggregate_vanilla(weights, sample_sizes), None, None
    if name == "simple":
        return aggregate_simple(weights), None, None
    if name == "median":
        return aggregate_median(weights), None, None
    if name == "krum":
        agg, idx = aggregate_krum(weights, krum_f)
        return agg, None, idx
    raise ConfigurationError(f"unknown aggregator {name!r}")
