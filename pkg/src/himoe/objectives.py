"""Training objectives: task loss, load balancing and the two routing regularizers.

Per-token quantities are averaged over the batch. Each routing term has a
matching ``*_grad`` returning dTerm/dpi with the batch shape of ``pi``; these
feed :func:`himoe.moe.moe_backward` through its ``pi_grad`` argument.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import as_finite


@dataclass
class BatchStats:
    h: np.ndarray  # fraction of tokens dispatched to each expert, sums to K
    P: np.ndarray  # mean routing probability per expert, sums to 1
    token_count: int

    @classmethod
    def from_routing(cls, mask, pi) -> "BatchStats":
        mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
        pi = np.atleast_2d(as_finite(pi, "pi"))
        if mask.shape != pi.shape:
            raise ValueError("selection mask and probabilities differ in shape")
        if pi.shape[0] == 0:
            raise ValueError("empty batch")
        return cls(h=mask.mean(axis=0), P=pi.mean(axis=0), token_count=pi.shape[0])

    def merge(self, other: "BatchStats") -> "BatchStats":
        """Statistics of the union of two batches."""
        n = self.token_count + other.token_count
        a, b = self.token_count / n, other.token_count / n
        return BatchStats(a * self.h + b * other.h, a * self.P + b * other.P, n)


def _batch(v) -> np.ndarray:
    arr = as_finite(v, "vector")
    return arr[None] if arr.ndim == 1 else arr


def _check_lambda(lam: float):
    if lam < 0:
        raise ValueError("regularization weight must be non-negative")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def task_loss(logits, labels) -> float:
    """Mean cross-entropy of class logits against integer labels (nats)."""
    z = _batch(logits)
    y = np.atleast_1d(np.asarray(labels))
    if z.shape[0] == 0:
        raise ValueError("empty batch")
    if y.shape != (z.shape[0],) or y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("labels must be one in-range class per token")
    lp = log_softmax(z)
    return float(-lp[np.arange(z.shape[0]), y].mean())


def task_loss_grad(logits, labels) -> np.ndarray:
    z = _batch(logits)
    y = np.atleast_1d(np.asarray(labels))
    p = np.exp(log_softmax(z))
    p[np.arange(z.shape[0]), y] -= 1.0
    return p / z.shape[0]


def load_balance_loss(stats: BatchStats, alpha: float, num_experts: int) -> float:
    """alpha * N * sum_i h_i P_i."""
    if stats.h.shape != (num_experts,) or stats.P.shape != (num_experts,):
        raise ValueError("batch statistics do not match the expert count")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return float(alpha * num_experts * np.dot(stats.h, stats.P))


def load_balance_grad(stats: BatchStats, alpha: float, num_experts: int) -> np.ndarray:
    # h is a count of hard selections, so only P carries gradient
    g = alpha * num_experts * stats.h / stats.token_count
    return np.broadcast_to(g, (stats.token_count, num_experts)).copy()


def inter_regularizer(pi_tilde, lambda_inter: float) -> float:
    """lambda_inter * mean ||pi~||^2."""
    _check_lambda(lambda_inter)
    pt = _batch(pi_tilde)
    if np.any(pt < 0):
        raise ValueError("post-selection weights must be non-negative")
    return float(lambda_inter * np.einsum("bi,bi->b", pt, pt).mean())


def inter_regularizer_grad(pi_tilde, lambda_inter: float) -> np.ndarray:
    # pi~ = pi * mask, so d||pi~||^2 / dpi = 2 pi~
    pt = _batch(pi_tilde)
    return 2.0 * lambda_inter * pt / pt.shape[0]


def intra_regularizer(pi, lambda_intra: float) -> float:
    """-lambda_intra * mean ||pi||^2."""
    _check_lambda(lambda_intra)
    p = _batch(pi)
    return float(-lambda_intra * np.einsum("bi,bi->b", p, p).mean())


def intra_regularizer_grad(pi, lambda_intra: float) -> np.ndarray:
    p = _batch(pi)
    return -2.0 * lambda_intra * p / p.shape[0]


def total_objective(task: float, load: float, intra: float, inter: float) -> float:
    parts = np.array([task, load, intra, inter], dtype=np.float64)
    if not np.all(np.isfinite(parts)):
        raise ValueError("objective terms must be finite")
    return float(task + load + intra + inter)


def lagrangian_form(task: float, load: float, pi, pi_tilde,
                    lambda_intra: float, lambda_inter: float) -> float:
    """task + load + lambda_inter E||pi~||^2 + lambda_intra E[1 - ||pi||^2].

    Differs from :func:`total_objective` of the same inputs by exactly
    ``lambda_intra``.
    """
    p, pt = _batch(pi), _batch(pi_tilde)
    sys_cost = float(np.einsum("bi,bi->b", pt, pt).mean())
    overlap_cost = float((1.0 - np.einsum("bi,bi->b", p, p)).mean())
    return float(task + load + lambda_inter * sys_cost + lambda_intra * overlap_cost)
