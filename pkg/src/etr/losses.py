"""Ranking losses over relevance probabilities, with analytic gradients.

Every loss takes a positive score ``y_pos`` and ``k >= 1`` negative scores,
all YES-probabilities in (0, 1). ``log_contrastive_loss`` is the plain
binary log loss, left unguarded on purpose: it goes non-finite as soon as a
score reaches 0 or 1. The three sigmoid-wrapped losses stay bounded, and
their gradients shrink as scores move away from the chosen centre.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class LossKind(str, enum.Enum):
    LOG_CONTRASTIVE = "log_contrastive"
    SIGMOID_CONTRASTIVE = "sigmoid_contrastive"
    SEP_SIGMOID = "sep_sigmoid"
    COMBINED_SIGMOID = "combined_sigmoid"


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 5.0
    lam: float = 0.5
    lambda_gt: float = 0.5
    lambda_neg: float = 0.5
    gamma: float = 1.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


@dataclass(frozen=True)
class ScoreBundle:
    y_pos: float
    y_negs: tuple[float, ...]

    def __init__(self, y_pos: float, y_negs: Sequence[float]):
        negs = tuple(float(y) for y in np.atleast_1d(y_negs))
        if len(negs) == 0:
            raise ValueError("need at least one negative score")
        object.__setattr__(self, "y_pos", float(y_pos))
        object.__setattr__(self, "y_negs", negs)

    @property
    def k(self) -> int:
        return len(self.y_negs)

    def as_vector(self) -> np.ndarray:
        return np.array((self.y_pos, *self.y_negs))

    @classmethod
    def from_vector(cls, v) -> "ScoreBundle":
        return cls(v[0], v[1:])


def sigmoid(x):
    """Logistic function, overflow-free for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def sigmoid_prime(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def log_contrastive_loss(bundle: ScoreBundle) -> float:
    negs = np.asarray(bundle.y_negs)
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(-np.log(np.float64(bundle.y_pos)) - np.sum(np.log(1.0 - negs)))


def _ratio(bundle: ScoreBundle) -> tuple[float, float]:
    mean_neg = float(np.mean(bundle.y_negs))
    denom = bundle.y_pos + mean_neg
    if not denom > 0:
        raise ValueError("degenerate score bundle")
    return bundle.y_pos / denom, mean_neg


def sigmoid_contrastive_loss(bundle: ScoreBundle, cfg: LossConfig = LossConfig()) -> float:
    ratio, _ = _ratio(bundle)
    return -sigmoid(cfg.epsilon * (ratio - cfg.lam))


def sep_sigmoid_loss(bundle: ScoreBundle, cfg: LossConfig = LossConfig()) -> float:
    mean_neg = float(np.mean(bundle.y_negs))
    return -sigmoid(cfg.epsilon * (bundle.y_pos - cfg.lambda_gt)) - sigmoid(cfg.epsilon * (cfg.lambda_neg - mean_neg))


def combined_sigmoid_loss(bundle: ScoreBundle, cfg: LossConfig = LossConfig()) -> float:
    return sep_sigmoid_loss(bundle, cfg) + cfg.gamma * sigmoid_contrastive_loss(bundle, cfg)


LOSSES = {
    LossKind.LOG_CONTRASTIVE: lambda b, cfg: log_contrastive_loss(b),
    LossKind.SIGMOID_CONTRASTIVE: sigmoid_contrastive_loss,
    LossKind.SEP_SIGMOID: sep_sigmoid_loss,
    LossKind.COMBINED_SIGMOID: combined_sigmoid_loss,
}


def loss_value(kind: LossKind | str, bundle: ScoreBundle, cfg: LossConfig = LossConfig()) -> float:
    return LOSSES[LossKind(kind)](bundle, cfg)


def _grad_log_contrastive(bundle: ScoreBundle) -> np.ndarray:
    negs = np.asarray(bundle.y_negs)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.concatenate(([-1.0 / np.float64(bundle.y_pos)], 1.0 / (1.0 - negs)))


def _grad_sigmoid_contrastive(bundle: ScoreBundle, cfg: LossConfig) -> np.ndarray:
    ratio, mean_neg = _ratio(bundle)
    denom = bundle.y_pos + mean_neg
    outer = -cfg.epsilon * sigmoid_prime(cfg.epsilon * (ratio - cfg.lam))
    d_pos = outer * mean_neg / denom**2
    d_neg = outer * (-bundle.y_pos / denom**2) / bundle.k
    return np.concatenate(([d_pos], np.full(bundle.k, d_neg)))


def _grad_sep_sigmoid(bundle: ScoreBundle, cfg: LossConfig) -> np.ndarray:
    mean_neg = float(np.mean(bundle.y_negs))
    d_pos = -cfg.epsilon * sigmoid_prime(cfg.epsilon * (bundle.y_pos - cfg.lambda_gt))
    d_neg = cfg.epsilon * sigmoid_prime(cfg.epsilon * (cfg.lambda_neg - mean_neg)) / bundle.k
    return np.concatenate(([d_pos], np.full(bundle.k, d_neg)))


def loss_gradient(kind: LossKind | str, bundle: ScoreBundle, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """Closed-form gradient w.r.t. ``(y_pos, y_neg_1, ..., y_neg_k)``."""
    kind = LossKind(kind)
    if kind is LossKind.LOG_CONTRASTIVE:
        return _grad_log_contrastive(bundle)
    if kind is LossKind.SIGMOID_CONTRASTIVE:
        return _grad_sigmoid_contrastive(bundle, cfg)
    if kind is LossKind.SEP_SIGMOID:
        return _grad_sep_sigmoid(bundle, cfg)
    return _grad_sep_sigmoid(bundle, cfg) + cfg.gamma * _grad_sigmoid_contrastive(bundle, cfg)


def finite_diff_check(
    kind: LossKind | str, bundle: ScoreBundle, cfg: LossConfig = LossConfig(), h: float = 1e-6
) -> float:
    """Max relative error between central differences and :func:`loss_gradient`.

    The relative error uses ``max(|analytic|, 1e-8)`` as denominator.
    """
    x = bundle.as_vector()
    margin = 10 * h
    if np.any(x < margin) or np.any(x > 1 - margin):
        raise ValueError(f"bundle too close to the boundary for step {h}")
    analytic = loss_gradient(kind, bundle, cfg)
    numeric = np.empty_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += h
        down[i] -= h
        numeric[i] = (
            loss_value(kind, ScoreBundle.from_vector(up), cfg) - loss_value(kind, ScoreBundle.from_vector(down), cfg)
        ) / (2 * h)
    return float(np.max(np.abs(numeric - analytic) / np.maximum(np.abs(analytic), 1e-8)))


def batch_loss_and_grad(
    kind: LossKind | str, y_pos: np.ndarray, y_negs: np.ndarray, cfg: LossConfig = LossConfig()
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised losses and gradients for n bundles sharing the same k.

    Args:
        y_pos: ``(n,)`` positive scores.
        y_negs: ``(n, k)`` negative scores.

    Returns:
        ``(losses (n,), grads (n, 1 + k))`` matching :func:`loss_value` and
        :func:`loss_gradient` row by row. Log-contrastive entries may be
        non-finite; nothing is raised.
    """
    kind = LossKind(kind)
    y_pos = np.asarray(y_pos, dtype=np.float64)
    y_negs = np.asarray(y_negs, dtype=np.float64)
    n, k = y_negs.shape
    if kind is LossKind.LOG_CONTRASTIVE:
        with np.errstate(divide="ignore", invalid="ignore"):
            loss = -np.log(y_pos) - np.log(1.0 - y_negs).sum(axis=1)
            grad = np.concatenate(((-1.0 / y_pos)[:, None], 1.0 / (1.0 - y_negs)), axis=1)
        return loss, grad

    eps = cfg.epsilon
    mean_neg = y_negs.mean(axis=1)
    a = eps * (y_pos - cfg.lambda_gt)
    c = eps * (cfg.lambda_neg - mean_neg)
    sep = -sigmoid(a) - sigmoid(c)
    g_sep = np.empty((n, 1 + k))
    g_sep[:, 0] = -eps * sigmoid_prime(a)
    g_sep[:, 1:] = (eps * sigmoid_prime(c) / k)[:, None]
    if kind is LossKind.SEP_SIGMOID:
        return sep, g_sep

    denom = y_pos + mean_neg
    if not np.all(denom > 0):
        raise ValueError("degenerate score bundle")
    u = eps * (y_pos / denom - cfg.lam)
    con = -sigmoid(u)
    outer = -eps * sigmoid_prime(u)
    g_con = np.empty((n, 1 + k))
    g_con[:, 0] = outer * mean_neg / denom**2
    g_con[:, 1:] = (outer * (-y_pos / denom**2) / k)[:, None]
    if kind is LossKind.SIGMOID_CONTRASTIVE:
        return con, g_con
    return sep + cfg.gamma * con, g_sep + cfg.gamma * g_con
