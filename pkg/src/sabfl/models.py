"""Flat-parameter models: quadratic objective, softmax regression, one-hidden-layer MLP.

Parameters always travel as a 1-D float64 numpy array. A :class:`ModelSpec`
knows how to slice that vector into weight matrices, and every evaluation
function checks the length before touching it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

KINDS = ("quadratic", "logistic_regression", "mlp")


class ConfigurationError(ValueError):
    """Raised when inputs do not fit together (wrong sizes, bad settings)."""


@dataclass(frozen=True)
class Minibatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if len(self.labels) < 1:
            raise ConfigurationError("minibatch must hold at least one sample")
        if self.features.shape[0] != len(self.labels):
            raise ConfigurationError(
                f"{self.features.shape[0]} feature rows vs {len(self.labels)} labels"
            )

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int = 1
    hidden_dim: int = 0
    quadratic_target: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ConfigurationError("input_dim must be >= 1")
        if self.kind == "quadratic":
            if self.quadratic_target is None:
                raise ConfigurationError("quadratic model needs quadratic_target")
            target = np.asarray(self.quadratic_target, dtype=np.float64)
            if target.shape != (self.input_dim,):
                raise ConfigurationError("quadratic_target length must equal input_dim")
            object.__setattr__(self, "quadratic_target", target)
        else:
            if self.num_classes < 2:
                raise ConfigurationError("classifiers need num_classes >= 2")
            if self.kind == "mlp" and self.hidden_dim < 1:
                raise ConfigurationError("mlp needs hidden_dim >= 1")

    @property
    def num_params(self) -> int:
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "quadratic":
            return d
        if self.kind == "logistic_regression":
            return c * d + c
        return h * d + h + c * h + c

    @property
    def shape_tag(self) -> str:
        if self.kind == "quadratic":
            return f"quadratic:{self.input_dim}"
        if self.kind == "logistic_regression":
            return f"logistic_regression:{self.input_dim}x{self.num_classes}"
        return f"mlp:{self.input_dim}x{self.hidden_dim}x{self.num_classes}"

    @property
    def is_classifier(self) -> bool:
        return self.kind != "quadratic"

    def unpack(self, w: np.ndarray):
        """Split a flat vector into views of the layer tensors."""
        d, c, h = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "quadratic":
            return (w,)
        if self.kind == "logistic_regression":
            return w[: c * d].reshape(c, d), w[c * d :]
        o = 0
        w1 = w[o : o + h * d].reshape(h, d); o += h * d
        b1 = w[o : o + h]; o += h
        w2 = w[o : o + c * h].reshape(c, h); o += c * h
        b2 = w[o : o + c]
        return w1, b1, w2, b2


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, biases included."""
    rng = np.random.default_rng(seed)
    d, c, h = spec.input_dim, spec.num_classes, spec.hidden_dim
    if spec.kind == "quadratic":
        bound = 1.0 / math.sqrt(d)
        return rng.uniform(-bound, bound, size=d)
    if spec.kind == "logistic_regression":
        bound = 1.0 / math.sqrt(d)
        return rng.uniform(-bound, bound, size=c * d + c)
    b_in, b_hid = 1.0 / math.sqrt(d), 1.0 / math.sqrt(h)
    return np.concatenate(
        [
            rng.uniform(-b_in, b_in, size=h * d + h),
            rng.uniform(-b_hid, b_hid, size=c * h + c),
        ]
    )


def _check(spec: ModelSpec, w: np.ndarray, data: Optional[Minibatch]) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.shape[0] != spec.num_params:
        raise ConfigurationError(
            f"parameter vector of length {w.size} does not match {spec.shape_tag} "
            f"({spec.num_params} params)"
        )
    if data is not None and spec.is_classifier:
        if data.features.ndim != 2 or data.features.shape[1] != spec.input_dim:
            raise ConfigurationError(
                f"features have shape {data.features.shape}, model expects "
                f"(*, {spec.input_dim})"
            )
        labels = data.labels
        if labels.min() < 0 or labels.max() >= spec.num_classes:
            raise ConfigurationError("labels outside [0, num_classes)")
    return w


def _logits(spec: ModelSpec, w: np.ndarray, x: np.ndarray):
    if spec.kind == "logistic_regression":
        W, b = spec.unpack(w)
        return x @ W.T + b, None
    w1, b1, w2, b2 = spec.unpack(w)
    pre = x @ w1.T + b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ w2.T + b2, (pre, hidden)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def eval_loss(spec: ModelSpec, w: np.ndarray, data: Minibatch) -> float:
    """Mean per-sample loss. Cross-entropy for classifiers, 0.5*||w - w*||^2 for the quadratic."""
    w = _check(spec, w, data)
    if spec.kind == "quadratic":
        diff = w - spec.quadratic_target
        return 0.5 * float(diff @ diff)
    z, _ = _logits(spec, w, data.features)
    logp = _log_softmax(z)
    picked = logp[np.arange(len(data)), data.labels]
    return float(-picked.mean())


def eval_gradient(spec: ModelSpec, w: np.ndarray, data: Minibatch) -> np.ndarray:
    w = _check(spec, w, data)
    if spec.kind == "quadratic":
        return w - spec.quadratic_target
    x, y = data.features, data.labels
    n = len(y)
    z, cache = _logits(spec, w, x)
    delta = np.exp(_log_softmax(z))
    delta[np.arange(n), y] -= 1.0
    delta /= n
    if spec.kind == "logistic_regression":
        return np.concatenate([(delta.T @ x).ravel(), delta.sum(axis=0)])
    pre, hidden = cache
    _, _, w2, _ = spec.unpack(w)
    g_w2 = delta.T @ hidden
    g_b2 = delta.sum(axis=0)
    back = (delta @ w2) * (pre > 0)
    g_w1 = back.T @ x
    g_b1 = back.sum(axis=0)
    return np.concatenate([g_w1.ravel(), g_b1, g_w2.ravel(), g_b2])


def predict(spec: ModelSpec, w: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest class index."""
    if not spec.is_classifier:
        raise ConfigurationError("predict needs a classification model")
    z, _ = _logits(spec, np.asarray(w, dtype=np.float64), features)
    return np.argmax(z, axis=1)


def eval_accuracy(spec: ModelSpec, w: np.ndarray, data: Minibatch) -> float:
    if not spec.is_classifier:
        raise ConfigurationError("accuracy is undefined for the quadratic objective")
    w = _check(spec, w, data)
    return float(np.mean(predict(spec, w, data.features) == data.labels))


def local_sgd(spec: ModelSpec, w0: np.ndarray, shard, epochs: int, lr: float,
              batch_size: int, rng_seed) -> np.ndarray:
    """Plain minibatch SGD for ``epochs`` passes over ``shard``.

    ``shard`` is anything with ``features`` and ``labels`` arrays (a
    :class:`~sabfl.data.DataShard` or a :class:`Minibatch`). Samples are
    reshuffled every epoch from ``rng_seed`` alone; the final partial batch
    is kept. A batch size above the shard size degrades to full-batch steps.
    """
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if not lr > 0:
        raise ConfigurationError("learning rate must be positive")
    if batch_size < 1:
        raise ConfigurationError("batch size must be >= 1")
    x, y = shard.features, shard.labels
    n = len(y)
    if n == 0:
        raise ConfigurationError("cannot train on an empty shard")
    w = _check(spec, w0, None).copy()
    b = min(batch_size, n)
    rng = np.random.default_rng(rng_seed)
    for _ in range(epochs):
        # a single full batch is order-free; keep natural order so it matches eval_gradient bitwise
        order = np.arange(n) if b == n else rng.permutation(n)
        for start in range(0, n, b):
            idx = order[start : start + b]
            w -= lr * eval_gradient(spec, w, Minibatch(x[idx], y[idx]))
    return w
