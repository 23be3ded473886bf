"""Randomized certification of the routing identities and bounds.

Each ``verify_*`` function draws random instances, checks one statement on
every instance, and returns a :class:`PropertyReport`. Known equality cases
are checked first so that each tolerance is exercised at its boundary.

``run_all`` derives one child generator per suite from a master seed with
``SeedSequence.spawn``, in the fixed order of :data:`SUITES`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import metrics, objectives
from .moe import coupling_from_gradients, expert_gradient_coupling, init_params
from .numerics import l2_norm_squared, random_simplex, softmax, spawn_rngs
from .router import EmaState, GroupPartition, RouterConfig, VARIANTS, flat_topk, grouped_topk

IDENTITY_TOL = 1e-12
COUPLING_TOL = 1e-10


@dataclass
class PropertyReport:
    property_name: str
    samples: int
    violations: int
    max_violation_magnitude: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


class _Tally:
    """Counts checks; ``excess`` is how far an instance sits past equality."""

    def __init__(self, name: str, tol: float):
        self.name, self.tol = name, tol
        self.samples = self.violations = 0
        self.worst = 0.0

    def instance(self, *excesses: float):
        self.samples += 1
        e = max(excesses)
        self.worst = max(self.worst, e)
        if e > self.tol:
            self.violations += 1

    def report(self) -> PropertyReport:
        return PropertyReport(self.name, self.samples, self.violations, float(self.worst), self.tol)


def random_partition(rng: np.random.Generator, num_experts: int, num_groups: int) -> GroupPartition:
    """Random assignment of experts to ``num_groups`` non-empty groups."""
    perm = rng.permutation(num_experts)
    cuts = np.sort(rng.choice(np.arange(1, num_experts), size=num_groups - 1, replace=False))
    return GroupPartition(tuple(tuple(sorted(int(e) for e in g)) for g in np.split(perm, cuts)))


def _random_router(rng: np.random.Generator, n_max: int = 16, variant: str = "grouped") -> RouterConfig:
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(1, n + 1))
    part = random_partition(rng, n, m)
    k = tuple(int(rng.integers(1, s + 1)) for s in part.sizes)
    return RouterConfig(num_experts=n, partition=part, k_per_group=k, variant=variant)


def _sharpened_simplex(rng: np.random.Generator, n: int, size: int) -> np.ndarray:
    """Simplex draws pushed toward corners or centre by a random power."""
    p = random_simplex(rng, n, size) ** rng.uniform(0.2, 5.0)
    return p / p.sum(axis=-1, keepdims=True)


def verify_cv_l2(samples: int, rng: np.random.Generator) -> PropertyReport:
    """CV(L)^2 == M ||L_hat||^2 - 1 on random non-negative loads."""
    t = _Tally("cv_l2_identity", IDENTITY_TOL)
    for L in ([2.0, 1.0, 1.0, 0.0], [1.0] * 4, [0.0, 0.0, 3.0]):
        t.instance(abs(metrics.cv_l2_identity_gap(L)))
    for _ in range(samples):
        m = int(rng.integers(2, 17))
        L = rng.uniform(0.0, 1.0, m)
        L[rng.uniform(size=m) < 0.2] = 0.0
        if not L.sum() > 0:
            L[rng.integers(m)] = rng.uniform(0.1, 1.0)
        t.instance(abs(metrics.cv_l2_identity_gap(L)))
    return t.report()


def _group_sum_excess(w: np.ndarray, part: GroupPartition) -> float:
    m = w @ part.membership()
    return float(m @ m - part.s_max * (w @ w))


def verify_group_sum_bound(samples: int, rng: np.random.Generator) -> PropertyReport:
    """||m||^2 <= S_max ||w||^2 where m sums non-negative w within groups."""
    t = _Tally("group_sum_bound", IDENTITY_TOL)
    part = GroupPartition.from_sizes([3, 2, 1])
    t.instance(_group_sum_excess(np.array([0.2, 0.2, 0.2, 0.0, 0.0, 0.0]), part))  # tight
    t.instance(_group_sum_excess(np.array([4 / 7, 0, 3 / 7, 0]), GroupPartition.from_sizes([2, 2])))
    for _ in range(samples):
        n = int(rng.integers(1, 33))
        part = random_partition(rng, n, int(rng.integers(1, n + 1)))
        w = rng.uniform(0.0, 1.0, n)
        w[rng.uniform(size=n) < 0.3] = 0.0
        t.instance(_group_sum_excess(w, part))
    return t.report()


def _inter_excess(pi: np.ndarray, cfg: RouterConfig) -> tuple[float, float, float]:
    out = grouped_topk(pi, cfg)
    pt = out.pi_tilde / out.pi_tilde.sum(axis=1, keepdims=True)
    r = pt @ cfg.partition.membership()
    r_bar = r.mean(axis=0)
    jensen = float(r_bar @ r_bar - np.einsum("bg,bg->b", r, r).mean())
    lemma = float(np.einsum("bg,bg->b", r, r).mean() - cfg.partition.s_max * np.einsum("bi,bi->b", pt, pt).mean())
    m = cfg.num_groups
    cv_sq = metrics.coefficient_of_variation(r_bar) ** 2
    identity = abs(cv_sq + 1.0 - m * float(r_bar @ r_bar))
    return jensen, lemma, identity


def verify_inter_bound(samples: int, rng: np.random.Generator,
                       tokens_per_sample: int = 64) -> PropertyReport:
    """||r_bar||^2 <= E||r||^2 <= S_max E||pi~||^2 and CV_group^2 + 1 == M ||r_bar||^2.

    pi~ is renormalized to sum to one per token before the check.
    """
    t = _Tally("inter_group_bound", IDENTITY_TOL)
    cfg = RouterConfig(num_experts=4, partition=GroupPartition.equal(4, 2), k_per_group=1)
    same = np.tile([0.4, 0.1, 0.3, 0.2], (tokens_per_sample, 1))
    t.instance(*_inter_excess(same, cfg))  # Jensen step is an equality
    balanced = np.tile([0.25, 0.25, 0.25, 0.25], (tokens_per_sample, 1))
    t.instance(*_inter_excess(balanced, cfg))  # r uniform: CV_group = 0
    for _ in range(samples):
        cfg = _random_router(rng)
        pi = _sharpened_simplex(rng, cfg.num_experts, tokens_per_sample)
        t.instance(*_inter_excess(pi, cfg))
    return t.report()


def verify_coupling_bound(samples: int, rng: np.random.Generator, clip: float = 1.0) -> PropertyReport:
    """sum_{i != j} |<pi_i g_i, pi_j g_j>| <= G^2 (1 - ||pi||^2) with clipped g_i."""
    t = _Tally("gradient_coupling_bound", COUPLING_TOL)
    g = np.array([[0.6, 0.8], [0.6, 0.8]])
    c, b = coupling_from_gradients([0.5, 0.5], g, clip)
    t.instance(c - b)  # aligned unit gradients: equality
    c, b = coupling_from_gradients([1.0, 0.0, 0.0], rng.normal(size=(3, 5)), clip)
    t.instance(c - b)  # one-hot: both sides zero
    for _ in range(samples):
        variant = VARIANTS[int(rng.integers(len(VARIANTS)))]
        cfg = _random_router(rng, n_max=8, variant=variant)
        d = int(rng.integers(2, 7))
        params = init_params(d, cfg.num_experts, rng, d_ff=int(rng.integers(2, 9)))
        # rescale so some instances clip and others do not
        params.w2 *= rng.uniform(0.1, 5.0)
        params.router *= rng.uniform(0.1, 5.0)
        x = rng.normal(size=d) * rng.uniform(0.5, 3.0)
        state = EmaState(rng.normal(size=cfg.num_experts), rng.normal(size=cfg.num_experts) * 0.1)
        c, b = expert_gradient_coupling(x, params, cfg, clip, state=state)
        t.instance(c - b)
    return t.report()


def symmetrize(pis: np.ndarray) -> np.ndarray:
    """Append every cyclic relabeling of each routing vector; marginals become 1/N."""
    pis = np.atleast_2d(pis)
    n = pis.shape[1]
    return np.concatenate([np.roll(pis, s, axis=1) for s in range(n)], axis=0)


def verify_collision_mi(samples: int, rng: np.random.Generator) -> PropertyReport:
    """Balanced marginals give I2 = ln(N E||pi||^2); token-independent routing gives
    I2 = 0; and I2 grows strictly as the routing temperature falls.
    """
    t = _Tally("collision_mutual_information", IDENTITY_TOL)

    def balanced_gap(pis):
        n = pis.shape[1]
        e = float(np.einsum("bi,bi->b", pis, pis).mean())
        return abs(metrics.collision_mutual_information(pis) - np.log(n * e))

    t.instance(balanced_gap(np.full((3, 4), 0.25)), abs(metrics.collision_mutual_information(np.full((3, 4), 0.25))))
    alt = np.array([[1.0, 0.0], [0.0, 1.0]])
    t.instance(balanced_gap(alt), abs(metrics.collision_mutual_information(alt) - np.log(2.0)))
    for _ in range(samples):
        n = int(rng.integers(2, 13))
        tokens = int(rng.integers(1, 9))
        pis = symmetrize(_sharpened_simplex(rng, n, tokens))
        same = np.tile(_sharpened_simplex(rng, n, 1), (tokens, 1))
        logits = rng.normal(size=(tokens, n)) * rng.uniform(0.5, 3.0)
        mi = [metrics.collision_mutual_information(symmetrize(softmax(logits, temp)))
              for temp in (2.0, 1.0, 0.5)]
        # a non-increasing step counts as a violation of at least the tolerance
        steps = [IDENTITY_TOL * 2 if b <= a else 0.0 for a, b in zip(mi, mi[1:])]
        t.instance(balanced_gap(pis), abs(metrics.collision_mutual_information(same)), *steps)
    return t.report()


def verify_lagrangian(samples: int, rng: np.random.Generator) -> PropertyReport:
    """The Lagrangian relaxation exceeds the regularized objective by exactly lambda_intra."""
    t = _Tally("lagrangian_constant", IDENTITY_TOL)

    def excess(task, load, pi, pt, l_intra, l_inter):
        total = objectives.total_objective(
            task, load, objectives.intra_regularizer(pi, l_intra),
            objectives.inter_regularizer(pt, l_inter))
        lag = objectives.lagrangian_form(task, load, pi, pt, l_intra, l_inter)
        return abs(lag - total - l_intra)

    pi = np.array([0.4, 0.1, 0.3, 0.2])
    pt = np.array([0.4, 0.0, 0.3, 0.0])
    t.instance(excess(1.0, 0.014, pi, pt, 0.1, 0.05))
    t.instance(excess(1.0, 0.014, pi, pt, 0.0, 0.05))
    for _ in range(samples):
        n = int(rng.integers(2, 17))
        b = int(rng.integers(1, 17))
        pi = _sharpened_simplex(rng, n, b)
        pt = flat_topk(pi, int(rng.integers(1, n + 1))).pi_tilde
        t.instance(excess(rng.uniform(0, 5), rng.uniform(0, 1), pi, pt,
                          rng.uniform(0, 1), rng.uniform(0, 1)))
    return t.report()


SUITES = (
    ("cv_l2", verify_cv_l2),
    ("group_sum_bound", verify_group_sum_bound),
    ("inter_bound", verify_inter_bound),
    ("coupling_bound", verify_coupling_bound),
    ("collision_mi", verify_collision_mi),
    ("lagrangian", verify_lagrangian),
)


def run_all(samples: int = 10_000, seed: int = 0) -> list[PropertyReport]:
    if samples < 1:
        raise ValueError("samples must be at least 1")
    rngs = spawn_rngs(seed, len(SUITES))
    return [fn(samples, rng) for (_, fn), rng in zip(SUITES, rngs)]


def report_json(reports: list[PropertyReport], seed: int, samples: int) -> str:
    doc = {
        "seed": int(seed),
        "samples_per_property": int(samples),
        "properties": [r.as_dict() for r in reports],
        "total_properties": len(reports),
        "total_passed": sum(r.passed for r in reports),
        "total_violations": sum(r.violations for r in reports),
        "all_passed": all(r.passed for r in reports),
    }
    return json.dumps(doc, indent=2) + "\n"


def check_overlap_identity(pi) -> float:
    """|sum_{i != j} pi_i pi_j - (1 - ||pi||^2)| computed by brute force."""
    p = np.asarray(pi, dtype=np.float64)
    outer = np.outer(p, p)
    return abs(float(outer.sum() - np.trace(outer)) - (1.0 - l2_norm_squared(p)))
