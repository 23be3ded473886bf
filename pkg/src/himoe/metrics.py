"""Load-balance, overlap, collision-entropy and diversity diagnostics.

Logarithms are natural (nats). The marginal expert usage p(i) is estimated as
the batch mean of pi_i, a plug-in estimate of the population marginal.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .moe import MoEParams, expert_forward
from .numerics import as_finite
from .router import GroupPartition, RoutingOutput

_SIMPLEX_TOL = 1e-9


def _loads(loads) -> np.ndarray:
    L = as_finite(loads, "loads")
    if L.ndim != 1 or L.size == 0:
        raise ValueError("loads must be a non-empty vector")
    if np.any(L < 0):
        raise ValueError("loads must be non-negative")
    if not L.sum() > 0:
        raise ValueError("total load is zero")
    # CV is scale-free; rescaling keeps subnormal or huge loads well conditioned
    return L / L.max()


def coefficient_of_variation(loads) -> float:
    """Population standard deviation over mean."""
    L = _loads(loads)
    return float(L.std() / L.mean())


def cv_l2_identity_gap(loads) -> float:
    """CV(L)^2 - (M ||L/sum L||^2 - 1); zero up to rounding."""
    L = _loads(loads)
    L_hat = L / L.sum()
    return coefficient_of_variation(L) ** 2 - (L.size * float(L_hat @ L_hat) - 1.0)


def _simplex(pi) -> np.ndarray:
    p = as_finite(pi, "pi")
    if np.any(p < -_SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=-1) - 1.0) > _SIMPLEX_TOL):
        raise ValueError("not a probability vector")
    return p


def overlap(pi) -> float | np.ndarray:
    """1 - ||pi||^2, the chance that two independent draws from pi differ."""
    p = _simplex(pi)
    out = 1.0 - np.einsum("...i,...i->...", p, p)
    return float(out) if out.ndim == 0 else out


def _batch_pis(batch_pis) -> np.ndarray:
    p = np.atleast_2d(_simplex(batch_pis)) if len(batch_pis) else np.empty((0, 0))
    if p.shape[0] == 0:
        raise ValueError("empty batch")
    return p


def collision_entropy_conditional(batch_pis) -> float:
    """H2(E|X) = -ln E_X ||pi(X)||^2."""
    p = _batch_pis(batch_pis)
    return float(-np.log(np.einsum("bi,bi->b", p, p).mean()))


def collision_entropy_marginal(batch_pis) -> float:
    """H2(E) = -ln sum_i p(i)^2 with p the batch-mean routing distribution."""
    p = _batch_pis(batch_pis).mean(axis=0)
    return float(-np.log(p @ p))


def collision_mutual_information(batch_pis) -> float:
    """I2(X;E) = ln(E ||pi||^2 / sum_i p(i)^2), non-negative by Jensen."""
    p = _batch_pis(batch_pis)
    marg = p.mean(axis=0)
    return float(np.log(np.einsum("bi,bi->b", p, p).mean() / (marg @ marg)))


def group_coverage(outputs: Sequence[RoutingOutput] | RoutingOutput,
                   partition: GroupPartition) -> float:
    """Mean number of groups hit by each token's selected experts."""
    masks = _masks(outputs)
    hit = (masks.astype(np.float64) @ partition.membership()) > 0
    return float(hit.sum(axis=1).mean())


def per_token_coverage(outputs, partition: GroupPartition) -> np.ndarray:
    masks = _masks(outputs)
    return ((masks.astype(np.float64) @ partition.membership()) > 0).sum(axis=1)


def _masks(outputs) -> np.ndarray:
    if isinstance(outputs, RoutingOutput):
        masks = np.atleast_2d(outputs.mask)
    else:
        if len(outputs) == 0:
            raise ValueError("no routing outputs")
        masks = np.vstack([np.atleast_2d(o.mask) for o in outputs])
    return masks


def expert_counts(mask) -> np.ndarray:
    """Hard token count per expert."""
    return np.atleast_2d(np.asarray(mask)).sum(axis=0).astype(np.float64)


def soft_group_loads(group_mass) -> np.ndarray:
    """L_g = sum over tokens of the normalized group mass r_g(x)."""
    return np.atleast_2d(as_finite(group_mass, "group mass")).sum(axis=0)


def _pairwise_cosines(vectors: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=-1)
    keep = norms > 0
    if not np.all(keep):
        warnings.warn(f"{int((~keep).sum())} zero-norm {what} excluded from cosine similarity")
    v = vectors[keep] / norms[keep, None]
    iu = np.triu_indices(v.shape[0], k=1)
    return (v @ v.T)[iu]


def parameter_cosine(params: MoEParams) -> tuple[float, float]:
    """Mean and std of pairwise cosine similarity of flattened expert parameters."""
    if params.num_experts < 2:
        raise ValueError("need at least two experts")
    cos = _pairwise_cosines(params.expert_vectors(), "experts")
    if cos.size == 0:
        raise ValueError("fewer than two non-zero experts")
    return float(cos.mean()), float(cos.std())


def expert_similarity(params: MoEParams, probe_batch) -> tuple[float, float]:
    """Mean and std over expert pairs of output cosine similarity.

    Each pair's similarity is the average, over probe tokens, of the cosine
    between the two experts' output vectors. Pairs with a zero output on a
    token skip that token.
    """
    x = np.atleast_2d(as_finite(probe_batch, "probe batch"))
    if x.shape[0] == 0:
        raise ValueError("empty probe batch")
    n = params.num_experts
    if n < 2:
        raise ValueError("need at least two experts")
    outs = np.stack([expert_forward(x, params.expert(i)) for i in range(n)], axis=1)  # (B, N, d)
    norms = np.linalg.norm(outs, axis=-1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"{int(zero.sum())} zero expert outputs excluded from similarity")
    unit = outs / np.where(zero, 1.0, norms)[..., None]
    cos = np.einsum("bid,bjd->bij", unit, unit)
    valid = ~(zero[:, :, None] | zero[:, None, :])
    iu = np.triu_indices(n, k=1)
    num = np.where(valid, cos, 0.0).sum(axis=0)[iu]
    den = valid.sum(axis=0)[iu]
    pair = num[den > 0] / den[den > 0]
    return float(pair.mean()), float(pair.std())


@dataclass
class MetricsSnapshot:
    step: int
    expert_cv: float
    group_cv: float
    coverage_mean: float
    collision_H2: float
    collision_MI: float
    mean_overlap: float
    task_loss: float
    load_loss: float
    intra_reg: float
    inter_reg: float
    total_loss: float

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(v)) for k, v in asdict(self).items() if k != "step"]

    def as_dict(self) -> dict:
        return asdict(self)


def routing_diagnostics(routing: RoutingOutput, partition: GroupPartition) -> dict[str, float]:
    """Batch-level routing metrics shared by training logs and evaluations."""
    pi = np.atleast_2d(routing.pi)
    return {
        "expert_cv": coefficient_of_variation(expert_counts(routing.mask)),
        "group_cv": coefficient_of_variation(soft_group_loads(routing.group_mass)),
        "coverage_mean": group_coverage(routing, partition),
        "collision_H2": collision_entropy_conditional(pi),
        "collision_MI": collision_mutual_information(pi),
        "mean_overlap": float(np.mean(overlap(pi))),
    }
