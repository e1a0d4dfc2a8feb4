"""Negative log-likelihoods of the Gaussian, Bernoulli and exponential sub-models,
and the weighted task losses trained on.

Losses are sums over windows and channels, never means. Targets that were not
actually observed are masked out of the longitudinal terms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .model import HeadOutputs
from .numerics import Tensor

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
SCALE_FLOOR = 1e-6
PROB_CLAMP = 1e-6
LOGIT_CLAMP = math.log((1.0 - PROB_CLAMP) / PROB_CLAMP)

KINDS = ("continuous", "binary", "event")


class LikelihoodDomainError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha_c: float = 1.0
    alpha_b: float = 1.0
    alpha_T: float = 1.0

    def __post_init__(self):
        if self.alpha_T <= 0:
            raise ValueError("alpha_T must be positive")

    def for_kind(self, kind: str) -> float:
        return {"continuous": self.alpha_c, "binary": self.alpha_b, "event": self.alpha_T}[kind]


@dataclass(frozen=True)
class EventTarget:
    time_to_event: float
    delta: int

    def __post_init__(self):
        if self.time_to_event < 0:
            raise ValueError("time to event must be non-negative")
        if self.delta not in (0, 1):
            raise ValueError("event indicator must be 0 or 1")


@dataclass(frozen=True)
class Task:
    """A loss that can be sampled during training: one kind over a channel subset."""

    kind: str
    channels: tuple[int, ...]
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass
class TargetBatch:
    """Targets for a batch of windows; ``*_obs`` flags mark usable labels."""

    y: np.ndarray
    y_obs: np.ndarray
    b: np.ndarray
    b_obs: np.ndarray
    time_to_event: np.ndarray
    delta: np.ndarray

    def __len__(self) -> int:
        return self.y.shape[0]

    def has_targets(self, task: Task) -> bool:
        cols = list(task.channels)
        if task.kind == "continuous":
            return bool(self.y_obs[:, cols].any())
        if task.kind == "binary":
            return bool(self.b_obs[:, cols].any())
        return len(self) > 0


# -- scalar/array closed forms --------------------------------------------------

def gaussian_nll(y, mu, sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise LikelihoodDomainError("sigma must be positive")
    r = (np.asarray(y, dtype=np.float64) - mu) / sigma
    out = HALF_LOG_2PI + np.log(sigma) + 0.5 * r * r
    return float(out) if out.ndim == 0 else out


def bernoulli_nll(b, p):
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise LikelihoodDomainError("p must lie strictly inside (0, 1)")
    logit = np.log(p) - np.log1p(-p)
    out = bernoulli_nll_logits(b, logit)
    return float(out) if out.ndim == 0 else out


def bernoulli_nll_logits(b, logit):
    """-[b log p + (1-b) log(1-p)] with p = sigmoid(logit), without forming p."""
    b = np.asarray(b, dtype=np.float64)
    z = np.asarray(logit, dtype=np.float64)
    return b * nx.softplus_np(-z) + (1.0 - b) * nx.softplus_np(z)


def exponential_nll(target: EventTarget | tuple, lam):
    if not isinstance(target, EventTarget):
        target = EventTarget(*target)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam <= 0):
        raise LikelihoodDomainError("lambda must be positive")
    out = -target.delta * np.log(lam) + lam * target.time_to_event
    return float(out) if out.ndim == 0 else out


# -- differentiable task losses ---------------------------------------------------

def _continuous_terms(heads: HeadOutputs, targets: TargetBatch, cols) -> Tensor:
    mu = heads.mu[:, cols]
    sigma = nx.maximum(nx.softplus(heads.sigma_pre[:, cols]), SCALE_FLOOR)
    obs = targets.y_obs[:, cols].astype(float)
    y = np.where(targets.y_obs[:, cols], targets.y[:, cols], 0.0)
    r = (y - mu) / sigma
    terms = (nx.log(sigma) + 0.5 * nx.square(r) + HALF_LOG_2PI) * obs
    return terms.sum()


def _binary_terms(heads: HeadOutputs, targets: TargetBatch, cols) -> Tensor:
    z = nx.clip(heads.p_logit[:, cols], -LOGIT_CLAMP, LOGIT_CLAMP)
    obs = targets.b_obs[:, cols].astype(float)
    b = np.where(targets.b_obs[:, cols], targets.b[:, cols], 0.0)
    terms = (nx.softplus(-z) * b + nx.softplus(z) * (1.0 - b)) * obs
    return terms.sum()


def _event_terms(heads: HeadOutputs, targets: TargetBatch, cols) -> Tensor:
    lam = nx.maximum(nx.softplus(heads.lambda_pre[:, cols]), SCALE_FLOOR)
    terms = nx.log(lam) * (-targets.delta[:, cols]) + lam * targets.time_to_event[:, cols]
    return terms.sum()


def task_loss(targets: TargetBatch, heads: HeadOutputs, which: str | Task,
              weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted loss for one task: ``alpha_kind`` times the summed NLL."""
    if len(targets) == 0:
        raise ValueError("task_loss needs a non-empty batch")
    task = which if isinstance(which, Task) else Task(which, tuple(range(_width(heads, which))))
    cols = list(task.channels)
    if task.kind == "continuous":
        raw = _continuous_terms(heads, targets, cols)
    elif task.kind == "binary":
        if heads.p_logit is None:
            raise ValueError("model has no binary head")
        raw = _binary_terms(heads, targets, cols)
    else:
        raw = _event_terms(heads, targets, cols)
    return raw * weights.for_kind(task.kind)


def _width(heads: HeadOutputs, kind: str) -> int:
    if kind == "continuous":
        return heads.mu.shape[1]
    if kind == "binary":
        return 0 if heads.p_logit is None else heads.p_logit.shape[1]
    return heads.lambda_pre.shape[1]


def total_loss(targets: TargetBatch, heads: HeadOutputs, weights: LossWeights = LossWeights(),
               tasks: Sequence[Task] | None = None) -> Tensor:
    """Sum of the weighted task losses (kind-level tasks by default)."""
    if tasks is None:
        tasks = [Task(k, tuple(range(_width(heads, k)))) for k in KINDS if _width(heads, k)]
    out = None
    for task in tasks:
        term = task_loss(targets, heads, task, weights)
        out = term if out is None else out + term
    return out


def joint_nll(targets: TargetBatch, heads: HeadOutputs) -> float:
    """Unweighted joint negative log-likelihood, accumulated term by term.

    Walks every window and channel with scalar closed forms; used as an
    independent check on the vectorised task losses.
    """
    mu, sigma, lam = heads.mu.value, heads.sigma, heads.lam
    p = heads.p
    total = 0.0
    for w in range(len(targets)):
        for c in range(mu.shape[1]):
            if targets.y_obs[w, c]:
                s = max(sigma[w, c], SCALE_FLOOR)
                total += HALF_LOG_2PI + math.log(s) + 0.5 * ((targets.y[w, c] - mu[w, c]) / s) ** 2
        if p is not None:
            for d in range(p.shape[1]):
                if targets.b_obs[w, d]:
                    q = min(max(p[w, d], PROB_CLAMP), 1.0 - PROB_CLAMP)
                    total -= math.log(q) if targets.b[w, d] else math.log(1.0 - q)
        for m in range(lam.shape[1]):
            rate = max(lam[w, m], SCALE_FLOOR)
            total += -targets.delta[w, m] * math.log(rate) + rate * targets.time_to_event[w, m]
    return total
