"""Routing probabilities, Top-K selection and group masses.

All functions accept either a single token (arrays of shape ``(N,)``) or a
batch (shape ``(B, N)``); the expert axis is always last. Expert indices are
0-based. Ties in Top-K are broken in favour of the lower expert index.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .numerics import as_finite, softmax

VARIANTS = ("flat", "flat_lossfree_bias", "grouped", "hi_moe")


@dataclass(frozen=True)
class GroupPartition:
    """Disjoint, non-empty expert groups that together cover ``0..N-1``."""

    groups: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        groups = tuple(tuple(int(e) for e in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if not groups:
            raise ValueError("partition needs at least one group")
        if any(len(g) == 0 for g in groups):
            raise ValueError("every group must be non-empty")
        flat = [e for g in groups for e in g]
        if sorted(flat) != list(range(len(flat))):
            raise ValueError("groups must be disjoint and cover experts 0..N-1 exactly")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "GroupPartition":
        """Contiguous groups: sizes (2, 2) gives {0, 1}, {2, 3}."""
        groups, start = [], 0
        for s in sizes:
            groups.append(tuple(range(start, start + int(s))))
            start += int(s)
        return cls(tuple(groups))

    @classmethod
    def equal(cls, num_experts: int, num_groups: int) -> "GroupPartition":
        if num_groups <= 0 or num_experts % num_groups:
            raise ValueError(f"cannot split {num_experts} experts into {num_groups} equal groups")
        return cls.from_sizes([num_experts // num_groups] * num_groups)

    @property
    def num_experts(self) -> int:
        return sum(len(g) for g in self.groups)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(g) for g in self.groups)

    @property
    def s_max(self) -> int:
        return max(self.sizes)

    def group_of(self) -> np.ndarray:
        """Array mapping expert index to its group index."""
        out = np.empty(self.num_experts, dtype=np.int64)
        for m, g in enumerate(self.groups):
            out[list(g)] = m
        return out

    def membership(self) -> np.ndarray:
        """(N, M) 0/1 matrix; ``w @ membership()`` sums ``w`` within each group."""
        a = np.zeros((self.num_experts, self.num_groups))
        a[np.arange(self.num_experts), self.group_of()] = 1.0
        return a


@dataclass(frozen=True)
class RouterConfig:
    num_experts: int
    partition: GroupPartition
    k_per_group: tuple[int, ...] = ()
    flat_k: int | None = None
    temperature: float = 1.0
    bias_strength: float = 0.01
    ema_decay: float = 0.9
    load_coeff: float = 0.01
    lambda_intra: float = 0.1
    lambda_inter: float = 0.05
    variant: str = "hi_moe"
    bias_rate: float = 0.001  # step of the loss-free selection-bias update

    def __post_init__(self):
        p = self.partition
        if p.num_experts != self.num_experts:
            raise ValueError(f"partition covers {p.num_experts} experts, config says {self.num_experts}")
        k = self.k_per_group
        if isinstance(k, (int, np.integer)):
            k = (int(k),) * p.num_groups
        elif not k:
            k = (1,) * p.num_groups
        k = tuple(int(v) for v in k)
        object.__setattr__(self, "k_per_group", k)
        if len(k) != p.num_groups:
            raise ValueError("k_per_group needs one entry per group")
        for km, size in zip(k, p.sizes):
            if not 1 <= km <= size:
                raise ValueError(f"K_m={km} is not in [1, {size}]")
        flat_k = sum(k) if self.flat_k is None else int(self.flat_k)
        object.__setattr__(self, "flat_k", flat_k)
        if not 1 <= flat_k <= self.num_experts:
            raise ValueError(f"K={flat_k} is not in [1, N]")
        if flat_k != sum(k):
            raise ValueError(f"flat K={flat_k} must equal sum of K_m={sum(k)}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        for name in ("bias_strength", "load_coeff", "lambda_intra", "lambda_inter", "bias_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def num_groups(self) -> int:
        return self.partition.num_groups

    @property
    def top_k(self) -> int:
        """Experts selected per token (K, also the sum of K_m)."""
        return self.flat_k

    def with_(self, **changes) -> "RouterConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class EmaState:
    """Running average of router logits plus the loss-free selection bias."""

    g_bar: np.ndarray
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        g = as_finite(self.g_bar, "g_bar").copy()
        b = np.zeros_like(g) if self.bias is None else as_finite(self.bias, "bias").copy()
        if g.shape != b.shape or g.ndim != 1:
            raise ValueError("g_bar and bias must be vectors of the same length")
        object.__setattr__(self, "g_bar", g)
        object.__setattr__(self, "bias", b)

    @classmethod
    def zeros(cls, num_experts: int) -> "EmaState":
        return cls(np.zeros(num_experts))


@dataclass
class RoutingOutput:
    pi: np.ndarray
    pi_tilde: np.ndarray
    mask: np.ndarray  # boolean selection, same shape as pi
    group_mass: np.ndarray

    @property
    def selected(self) -> np.ndarray:
        """Selected expert indices of a single token."""
        if self.mask.ndim != 1:
            raise ValueError("selected is only defined for a single token; use mask")
        return np.flatnonzero(self.mask)


def _check_dim(logits: np.ndarray, n: int):
    if logits.shape[-1] != n:
        raise ValueError(f"expected {n} logits per token, got {logits.shape[-1]}")


def ema_update(state: EmaState, logits, decay: float) -> EmaState:
    """g_bar <- decay * g_bar + (1 - decay) * mean logits over the batch."""
    g = as_finite(logits, "logits")
    _check_dim(g, state.g_bar.size)
    mean = g if g.ndim == 1 else g.mean(axis=0)
    return EmaState(decay * state.g_bar + (1.0 - decay) * mean, state.bias)


def bias_corrected_probabilities(logits, state: EmaState, cfg: RouterConfig):
    """softmax((g - tau * g_bar) / T), then fold the raw logits into the EMA.

    Every token of a batch sees the same frozen ``g_bar``; the EMA absorbs the
    batch-mean of the uncorrected logits once.
    """
    g = as_finite(logits, "logits")
    _check_dim(g, cfg.num_experts)
    if state.g_bar.size != cfg.num_experts:
        raise ValueError("EMA state dimension does not match the router")
    if cfg.bias_strength == 0.0:
        pi = softmax(g, cfg.temperature)
    else:
        pi = softmax(g - cfg.bias_strength * state.g_bar, cfg.temperature)
    return pi, ema_update(state, g, cfg.ema_decay)


def _topk_mask(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated scores keeps the lower index first among ties
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(scores.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def _group_mass(pi_tilde: np.ndarray, partition: GroupPartition) -> np.ndarray:
    mass = pi_tilde @ partition.membership()
    total = mass.sum(axis=-1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("routing weights sum to zero; no expert selected")
    return mass / total


def _output(pi: np.ndarray, mask: np.ndarray, partition: GroupPartition | None) -> RoutingOutput:
    pi_tilde = np.where(mask, pi, 0.0)
    if partition is None:
        r = np.ones(pi.shape[:-1] + (1,))
    else:
        r = _group_mass(pi_tilde, partition)
    return RoutingOutput(pi=pi, pi_tilde=pi_tilde, mask=mask, group_mass=r)


def flat_topk(pi, k: int, partition: GroupPartition | None = None,
              selection_scores=None) -> RoutingOutput:
    """Keep the ``k`` largest probabilities of each token and zero the rest.

    ``selection_scores`` (same shape as ``pi``) overrides what is ranked, which
    is how the loss-free baseline selects on biased logits while weighting by
    the unbiased probabilities. ``partition`` is only used for the group mass.
    """
    pi = as_finite(pi, "pi")
    n = pi.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"K={k} must lie in [1, {n}]")
    scores = pi if selection_scores is None else as_finite(selection_scores, "selection scores")
    return _output(pi, _topk_mask(scores, k), partition)


def grouped_topk(pi, cfg: RouterConfig) -> RoutingOutput:
    """Keep the K_m largest probabilities inside every group G_m (softmax, then mask)."""
    pi = as_finite(pi, "pi")
    _check_dim(pi, cfg.num_experts)
    mask = np.zeros(pi.shape, dtype=bool)
    for group, km in zip(cfg.partition.groups, cfg.k_per_group):
        idx = np.asarray(group)
        local = _topk_mask(pi[..., idx], km)
        mask[..., idx] = local
    return _output(pi, mask, cfg.partition)


def group_mass(output: RoutingOutput, partition: GroupPartition) -> np.ndarray:
    """Normalized routing mass per group, r_g = sum_{e in G_g} pi~_e / sum_e pi~_e."""
    return _group_mass(np.asarray(output.pi_tilde, dtype=np.float64), partition)


def route(logits, state: EmaState, cfg: RouterConfig):
    """Dispatch on ``cfg.variant`` and return (RoutingOutput, updated state).

    flat                softmax, global Top-K
    flat_lossfree_bias  softmax for weights, Top-K ranked on logits + bias
    grouped             softmax, group-local Top-K_m
    hi_moe              bias-corrected softmax, group-local Top-K_m
    """
    g = as_finite(logits, "logits")
    _check_dim(g, cfg.num_experts)
    v = cfg.variant
    if v == "hi_moe":
        pi, new_state = bias_corrected_probabilities(g, state, cfg)
        return grouped_topk(pi, cfg), new_state
    pi = softmax(g, cfg.temperature)
    if v == "grouped":
        out = grouped_topk(pi, cfg)
    elif v == "flat":
        out = flat_topk(pi, cfg.top_k, cfg.partition)
    else:
        out = flat_topk(pi, cfg.top_k, cfg.partition, selection_scores=g + state.bias)
    return out, state


def update_selection_bias(state: EmaState, h, cfg: RouterConfig) -> EmaState:
    """Loss-free balancing step: b_i <- b_i - rate * sign(h_i - K/N)."""
    h = as_finite(h, "h")
    _check_dim(h, cfg.num_experts)
    target = cfg.top_k / cfg.num_experts
    return EmaState(state.g_bar, state.bias - cfg.bias_rate * np.sign(h - target))
