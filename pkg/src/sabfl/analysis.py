"""Numerical checks of the softmax-aggregation convergence guarantee.

Everything here runs on the quadratic objective F(w) = 0.5 * ||w - w*||^2,
where L = 1, F* = 0 and the true gradient are known exactly. Stochastic
gradients are the true gradient plus zero-mean Gaussian noise whose total
variance is M / B_r, so unbiasedness and the variance bound hold by
construction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np

from .aggregation import LossMatrix, aggregate_softmax, softmax_scores
from .models import ConfigurationError, ModelSpec


def inverse_schedule(L: float) -> Callable[[int], float]:
    """alpha_r = 1 / (ceil(2L) + r)."""
    c = math.ceil(2 * L)
    return lambda r: 1.0 / (c + r)


@dataclass(frozen=True)
class TheoryConfig:
    L: float = 1.0
    delta: float = 0.01
    M: float = 0.1
    eps: float = 1e-3
    eps_tilde: float = 0.1
    lr_schedule: Optional[Callable[[int], float]] = None
    batch_schedule: Optional[Callable[[int], int]] = None
    E: int = 1
    K: int = 5
    V: int = 3
    R: int = 1000

    def __post_init__(self):
        if self.lr_schedule is None:
            object.__setattr__(self, "lr_schedule", inverse_schedule(self.L))
        if self.batch_schedule is None:
            object.__setattr__(self, "batch_schedule", lambda r: 1)
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.M < 0 or self.eps < 0 or self.eps_tilde <= 0:
            raise ConfigurationError("M, eps must be >= 0 and eps_tilde > 0")
        if min(self.E, self.K, self.V, self.R) < 1:
            raise ConfigurationError("E, K, V and R must be >= 1")
        prev = math.inf
        for r in range(1, self.R + 1):
            a = self.alpha(r)
            if not 0 < a <= prev:
                raise ConfigurationError("learning rates must be positive and non-increasing")
            step = self.L ** 2 * a ** 2 * (self.E + 1) * (self.E - 2) / 2 + self.L * a * self.E
            if step > 1 + 1e-12:
                raise ConfigurationError(f"round {r}: step-size condition violated ({step:.4g} > 1)")
            if 1 - self.delta < self.L ** 2 * a ** 2:
                raise ConfigurationError(f"round {r}: 1 - delta < L^2 alpha^2")
            if self.batch(r) < 1:
                raise ConfigurationError("batch sizes must be >= 1")
            prev = a

    def alpha(self, r: int) -> float:
        return float(self.lr_schedule(r))

    def batch(self, r: int) -> int:
        return int(self.batch_schedule(r))


@dataclass
class ConvergenceTrace:
    alpha: np.ndarray          # alpha_r, r = 1..R
    grad_norm_sq: np.ndarray   # ||grad F(w~^{r-1})||^2
    post_grad_norm_sq: np.ndarray  # ||grad F(w~^r)||^2
    cum_lhs: np.ndarray        # running sum of alpha_r * grad_norm_sq
    rhs: np.ndarray            # convergence bound evaluated at R = r

    @property
    def normalized(self) -> np.ndarray:
        return self.cum_lhs / np.cumsum(self.alpha)


def convergence_rhs(cfg: TheoryConfig, R: int, F0: float, Fstar: float = 0.0) -> float:
    return float(convergence_rhs_curve(cfg, R, F0, Fstar)[-1])


def convergence_rhs_curve(cfg: TheoryConfig, R: int, F0: float, Fstar: float = 0.0) -> np.ndarray:
    """Bound value for every horizon 1..R."""
    E, L, M, d = cfg.E, cfg.L, cfg.M, cfg.delta
    denom = E - 1 + d
    terms = np.empty(R)
    for r in range(1, R + 1):
        a, b = cfg.alpha(r), cfg.batch(r)
        terms[r - 1] = L * E * a ** 2 * M * (6 * E + L * (2 * E - 1) * (E - 1) * a) / (6 * b * denom)
    return 2 * (F0 - Fstar) / denom + np.cumsum(terms) + 2 * cfg.eps / denom


def oracle_validator_loss(true_F: Callable[[np.ndarray], float], w: np.ndarray,
                          tolerance: float, rng: np.random.Generator) -> float:
    """true_F(w) perturbed by u with |u| < tolerance (strictly, after rounding)."""
    exact = float(true_F(w))
    if not tolerance > 0:
        return exact
    u = tolerance * rng.uniform(-1.0, 1.0)
    noisy = exact + u
    if not abs(noisy - exact) < tolerance:
        return exact
    return noisy


def validator_scale(rough_losses: Sequence[float], eps_tilde: float) -> float:
    """m_j = max_i |F~_j(w_i)| + eps_tilde."""
    return float(np.max(np.abs(rough_losses))) + eps_tilde


def precision_schedule(eps: float, r: int, K: int, m: float) -> float:
    """Per-round validator tolerance eps / (2^r K^(5/2) m); 0 once it underflows."""
    try:
        return eps / (math.ldexp(1.0, r) * K ** 2.5 * m)
    except OverflowError:
        return 0.0


def quadratic_spec(dim: int, seed: int = 0) -> ModelSpec:
    target = np.random.default_rng(seed).uniform(-1, 1, size=dim)
    return ModelSpec("quadratic", dim, quadratic_target=target)


def run_oracle_training(spec: ModelSpec, cfg: TheoryConfig, seed, w0: Optional[np.ndarray] = None,
                        ) -> ConvergenceTrace:
    """Single-minibatch local steps, oracle validators, softmax aggregation.

    ``w0`` defaults to w* + 1/sqrt(d) on every coordinate, i.e. F(w0) = 0.5.
    """
    if spec.kind != "quadratic":
        raise ConfigurationError("the theory check needs the quadratic objective")
    target = spec.quadratic_target
    d = spec.input_dim
    w = target + 1.0 / math.sqrt(d) if w0 is None else np.asarray(w0, dtype=np.float64).copy()
    rng = np.random.default_rng(seed)

    def F(v):
        diff = v - target
        return 0.5 * float(diff @ diff)

    R = cfg.R
    alphas = np.array([cfg.alpha(r) for r in range(1, R + 1)])
    pre = np.empty(R)
    post = np.empty(R)
    workers = tuple(range(cfg.K))
    validators = tuple(range(cfg.K, cfg.K + cfg.V))
    for r in range(1, R + 1):
        g = w - target
        pre[r - 1] = float(g @ g)
        a, b = alphas[r - 1], cfg.batch(r)
        sigma = math.sqrt(cfg.M / (d * b))
        local = []
        for _ in workers:
            wi = w.copy()
            for _ in range(cfg.E):
                grad = (wi - target) + sigma * rng.standard_normal(d)
                wi = wi - a * grad
            local.append(wi)
        rows = []
        for _ in validators:
            rough = [oracle_validator_loss(F, wi, cfg.eps_tilde, rng) for wi in local]
            tol = precision_schedule(cfg.eps, r, cfg.K, validator_scale(rough, cfg.eps_tilde))
            rows.append([oracle_validator_loss(F, wi, tol, rng) for wi in local])
        w, _ = aggregate_softmax(local, LossMatrix(np.array(rows), validators, workers))
        g = w - target
        post[r - 1] = float(g @ g)
    F0 = 0.5 * pre[0]
    return ConvergenceTrace(alphas, pre, post, np.cumsum(alphas * pre),
                            convergence_rhs_curve(cfg, R, F0, 0.0))


def mean_traces(traces: Iterable[ConvergenceTrace]) -> ConvergenceTrace:
    traces = list(traces)
    stack = lambda name: np.mean([getattr(t, name) for t in traces], axis=0)
    return ConvergenceTrace(traces[0].alpha, stack("grad_norm_sq"), stack("post_grad_norm_sq"),
                            stack("cum_lhs"), traces[0].rhs)


def sample_round_index(alphas, rng: np.random.Generator) -> int:
    """1-based round index drawn with probability proportional to alpha_r."""
    p = np.asarray(alphas, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or p.sum() <= 0:
        raise ConfigurationError("need a non-empty, non-negative weight vector with positive sum")
    cum = np.cumsum(p)
    pos = int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))
    pos = min(pos, p.size - 1)
    while p[pos] == 0:
        pos -= 1
    return pos + 1


def sampled_gradient_norms(traces: Sequence[ConvergenceTrace], R: int, draws: int,
                           rng: np.random.Generator) -> np.ndarray:
    """||grad F(w~^{r(R)})||^2 for ``draws`` sampled rounds per trace."""
    out = []
    for t in traces:
        for _ in range(draws):
            idx = sample_round_index(t.alpha[:R], rng)
            out.append(t.post_grad_norm_sq[idx - 1])
    return np.array(out)


@dataclass(frozen=True)
class InequalityReport:
    softmax_mean: float      # sum softmax(x)_i x_i
    neg_softmax_mean: float  # sum softmax(-x)_i x_i
    mean: float
    upper_margin: float      # softmax_mean - mean, >= 0
    lower_margin: float      # mean - neg_softmax_mean, >= 0
    all_equal: bool

    def holds(self, slack: float = 1e-12) -> bool:
        return self.upper_margin >= -slack and self.lower_margin >= -slack


def check_softmax_mean_inequality(x) -> InequalityReport:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ConfigurationError("need a non-empty vector")
    up = softmax_scores(-x)
    down = softmax_scores(x)
    mean = math.fsum(x) / x.size
    s_up = math.fsum(up * x)
    s_down = math.fsum(down * x)
    return InequalityReport(s_up, s_down, mean, s_up - mean, mean - s_down,
                            bool(np.all(x == x[0])))
