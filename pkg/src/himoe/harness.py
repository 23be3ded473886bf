"""Desk-scale training harness: one grouped MoE layer plus a linear classifier
trained on Gaussian clusters, with baseline comparison and lambda sweeps.

A run is a pure function of (TrainConfig, dataset): the initialization stream
and the batch-order stream are the two children of ``SeedSequence(seed)``.
"""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import objectives as obj
from .metrics import (MetricsSnapshot, expert_counts, expert_similarity, parameter_cosine,
                      per_token_coverage, routing_diagnostics)
from .moe import MoEParams, init_params, moe_backward, moe_forward, save_checkpoint
from .numerics import NonFiniteError, make_rng, spawn_rngs
from .router import EmaState, GroupPartition, RouterConfig, RoutingOutput, update_selection_bias

BASELINE_VARIANTS = ("flat", "flat_lossfree_bias", "grouped", "hi_moe")
TERMS = ("task", "load", "intra", "inter")
PROBE_TOKENS = 256


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_clusters: int = 16
    dim: int = 16
    tokens_per_cluster: int = 64
    cluster_spread: float = 0.3
    seed: int = 0


def generate_synthetic(spec: SyntheticDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Unit-norm Gaussian cluster centres; the label of a point is its cluster.

    Returns (X, y) shuffled by a permutation drawn from the spec's seed.
    """
    if spec.num_clusters < 1 or spec.dim < 1 or spec.tokens_per_cluster < 1:
        raise ValueError("dataset needs at least one cluster, dimension and token")
    if spec.cluster_spread < 0:
        raise ValueError("cluster_spread must be non-negative")
    rng = make_rng(spec.seed)
    centers = rng.normal(size=(spec.num_clusters, spec.dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    if spec.num_clusters > 1:
        dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
        if np.min(dist[np.triu_indices(spec.num_clusters, 1)]) == 0:
            raise ValueError("cluster centres collided; choose another seed")
    labels = np.repeat(np.arange(spec.num_clusters), spec.tokens_per_cluster)
    points = centers[labels] + spec.cluster_spread * rng.normal(size=(labels.size, spec.dim))
    order = rng.permutation(labels.size)
    return points[order], labels[order]


@dataclass(frozen=True)
class TrainConfig:
    router: RouterConfig
    d_model: int = 16
    d_ff: int = 64
    num_classes: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    steps: int = 2000
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def with_router(self, **changes) -> "TrainConfig":
        return replace(self, router=self.router.with_(**changes))

    def snapshot(self) -> dict:
        d = asdict(self)
        r = d.pop("router")
        r["group_sizes"] = list(self.router.partition.sizes)
        r["k_per_group"] = list(self.router.k_per_group)
        del r["partition"]
        d.update(r)
        return d


def default_router(**overrides) -> RouterConfig:
    """Eight experts in four groups of two, one expert per group."""
    base = dict(num_experts=8, partition=GroupPartition.equal(8, 4), k_per_group=1,
                temperature=1.0, bias_strength=0.01, ema_decay=0.9, load_coeff=0.01,
                lambda_intra=0.1, lambda_inter=0.05, variant="hi_moe")
    base.update(overrides)
    return RouterConfig(**base)


@dataclass
class Classifier:
    layer: MoEParams
    head_w: np.ndarray  # (d, C)
    head_b: np.ndarray  # (C,)

    def arrays(self) -> dict[str, np.ndarray]:
        d = self.layer.arrays()
        d["head_w"], d["head_b"] = self.head_w, self.head_b
        return d

    @classmethod
    def from_arrays(cls, a: dict) -> "Classifier":
        layer = MoEParams(**{k: a[k] for k in MoEParams.FIELDS})
        return cls(layer, a["head_w"], a["head_b"])

    def copy(self) -> "Classifier":
        return Classifier.from_arrays({k: v.copy() for k, v in self.arrays().items()})


def init_classifier(cfg: TrainConfig, rng: np.random.Generator) -> Classifier:
    layer = init_params(cfg.d_model, cfg.router.num_experts, rng, d_ff=cfg.d_ff)
    bound = 1.0 / np.sqrt(cfg.d_model)
    head_w = rng.uniform(-bound, bound, size=(cfg.d_model, cfg.num_classes))
    head_b = rng.uniform(-bound, bound, size=cfg.num_classes)
    return Classifier(layer, head_w, head_b)


@dataclass
class StepResult:
    parts: dict[str, float]
    routing: RoutingOutput
    state: EmaState
    logits: np.ndarray
    grads: dict[str, np.ndarray] | None = None


def _effective_alpha(rc: RouterConfig) -> float:
    # the loss-free baseline balances through its selection bias only
    return 0.0 if rc.variant == "flat_lossfree_bias" else rc.load_coeff


def forward_backward(model: Classifier, x: np.ndarray, y: np.ndarray, rc: RouterConfig,
                     state: EmaState, terms: Sequence[str] = TERMS,
                     need_grad: bool = True) -> StepResult:
    """Loss parts of one batch and, if requested, gradients of the sum of ``terms``.

    ``parts`` always holds every term plus ``total``; ``terms`` only selects
    which of them are differentiated.
    """
    layer = model.layer
    out, routing, new_state = moe_forward(x, layer, rc, state)
    logits = out @ model.head_w + model.head_b

    stats = obj.BatchStats.from_routing(routing.mask, routing.pi)
    alpha = _effective_alpha(rc)
    parts = {
        "task": obj.task_loss(logits, y),
        "load": obj.load_balance_loss(stats, alpha, rc.num_experts),
        "intra": obj.intra_regularizer(routing.pi, rc.lambda_intra),
        "inter": obj.inter_regularizer(routing.pi_tilde, rc.lambda_inter),
    }
    parts["total"] = obj.total_objective(parts["task"], parts["load"], parts["intra"], parts["inter"])
    result = StepResult(parts, routing, new_state, logits)
    if not need_grad:
        return result

    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    d_pi = np.zeros_like(routing.pi)
    if "load" in terms:
        d_pi += obj.load_balance_grad(stats, alpha, rc.num_experts)
    if "intra" in terms:
        d_pi += obj.intra_regularizer_grad(routing.pi, rc.lambda_intra)
    if "inter" in terms:
        d_pi += obj.inter_regularizer_grad(routing.pi_tilde, rc.lambda_inter)
    if "task" in terms:
        d_logits = obj.task_loss_grad(logits, y)
        g_head_w = out.T @ d_logits
        g_head_b = d_logits.sum(axis=0)
        d_out = d_logits @ model.head_w.T
    else:
        g_head_w = np.zeros_like(model.head_w)
        g_head_b = np.zeros_like(model.head_b)
        d_out = np.zeros_like(x)
    grads = moe_backward(x, d_out, layer, rc, routing, pi_grad=d_pi)
    g = grads.arrays()
    g["head_w"], g["head_b"] = g_head_w, g_head_b
    result.grads = g
    return result


class Adam:
    """Adam with bias correction and optional decoupled weight decay."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, beta1: float, beta2: float,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.wd:
                p -= self.lr * self.wd * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class RunRecord:
    config: dict
    snapshots: list[MetricsSnapshot] = field(default_factory=list)
    activations: np.ndarray | None = None  # (steps, N) selected-token counts
    initial: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)
    final_histogram: list[float] = field(default_factory=list)
    aborted_at: int | None = None
    model: Classifier | None = None

    @property
    def aborted(self) -> bool:
        return self.aborted_at is not None

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MetricsSnapshot.columns())
        for s in self.snapshots:
            w.writerow(s.row())
        return buf.getvalue()

    def activations_csv(self) -> str:
        n = self.config["num_experts"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step"] + [f"expert_{i}" for i in range(n)])
        acts = self.activations if self.activations is not None else np.zeros((0, n))
        for t, row in enumerate(acts):
            w.writerow([t] + [int(c) for c in row])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "config": self.config,
            "steps_completed": len(self.snapshots),
            "aborted_at": self.aborted_at,
            "initial": self.initial,
            "final": self.final,
            "final_histogram": self.final_histogram,
        }

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(self.metrics_csv())
        (out / "activations.csv").write_text(self.activations_csv())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        if self.model is not None:
            save_checkpoint(out / "layer.ckpt", self.model.layer, seed=self.config["seed"],
                            num_groups=len(self.config["group_sizes"]))
        return out


def evaluate(model: Classifier, x: np.ndarray, y: np.ndarray, rc: RouterConfig,
             state: EmaState) -> dict:
    """Loss parts and routing diagnostics on a fixed token set; the EMA is not advanced."""
    res = forward_backward(model, x, y, rc, state, need_grad=False)
    diag = routing_diagnostics(res.routing, rc.partition)
    out = {f"{k}_loss" if k in ("task", "load", "total") else f"{k}_reg": float(v)
           for k, v in res.parts.items()}
    out.update(diag)
    out["accuracy"] = float(np.mean(res.logits.argmax(axis=1) == y))
    out["min_coverage"] = int(per_token_coverage(res.routing, rc.partition).min())
    out["expert_counts"] = [int(c) for c in expert_counts(res.routing.mask)]
    pc_mean, pc_std = parameter_cosine(model.layer)
    sim_mean, sim_std = expert_similarity(model.layer, x[:PROBE_TOKENS])
    out.update(parameter_cosine_mean=pc_mean, parameter_cosine_std=pc_std,
               expert_similarity_mean=sim_mean, expert_similarity_std=sim_std)
    return out


def _snapshot(step: int, res: StepResult, rc: RouterConfig) -> MetricsSnapshot:
    diag = routing_diagnostics(res.routing, rc.partition)
    p = res.parts
    return MetricsSnapshot(step=step, **diag, task_loss=p["task"], load_loss=p["load"],
                           intra_reg=p["intra"], inter_reg=p["inter"], total_loss=p["total"])


def train(cfg: TrainConfig, dataset: tuple[np.ndarray, np.ndarray],
          min_coverage_log: list | None = None) -> RunRecord:
    """Minibatch Adam on the full objective; one metrics snapshot per step.

    The run stops at the first non-finite loss and records that step in
    ``aborted_at``. If ``min_coverage_log`` is given, the smallest per-token
    group coverage of every training batch is appended to it.
    """
    x_all, y_all = dataset
    rc = cfg.router
    if x_all.shape[1] != cfg.d_model:
        raise ValueError("dataset dimension does not match d_model")
    if y_all.max() >= cfg.num_classes:
        raise ValueError("dataset has more classes than the classifier head")
    init_rng, order_rng = spawn_rngs(cfg.seed, 2)
    model = init_classifier(cfg, init_rng)
    state = EmaState.zeros(rc.num_experts)
    record = RunRecord(config=cfg.snapshot())
    record.initial = evaluate(model, x_all, y_all, rc, state)

    params = model.arrays()
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    acts = np.zeros((cfg.steps, rc.num_experts), dtype=np.int64)
    n = x_all.shape[0]
    perm, cursor = order_rng.permutation(n), 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > n:
            perm, cursor = order_rng.permutation(n), 0
        idx = perm[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                res = forward_backward(model, x_all[idx], y_all[idx], rc, state)
        except NonFiniteError:
            record.aborted_at = step
            break
        if not np.isfinite(res.parts["total"]) or not all(np.all(np.isfinite(g)) for g in res.grads.values()):
            record.aborted_at = step
            break
        record.snapshots.append(_snapshot(step, res, rc))
        acts[step] = res.routing.mask.sum(axis=0)
        if min_coverage_log is not None:
            min_coverage_log.append(int(per_token_coverage(res.routing, rc.partition).min()))
        opt.step(params, res.grads)
        state = res.state
        if rc.variant == "flat_lossfree_bias":
            state = update_selection_bias(state, res.routing.mask.mean(axis=0), rc)
    record.activations = acts[:len(record.snapshots)]
    if record.aborted:
        record.final = {}
    else:
        record.final = evaluate(model, x_all, y_all, rc, state)
        record.final_histogram = record.final["expert_counts"]
    record.model = model
    return record


# -- comparisons and sweeps ---------------------------------------------------

def baseline_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    """Baselines run without the hierarchical terms and without logit correction."""
    if variant == "hi_moe":
        return cfg.with_router(variant="hi_moe")
    return cfg.with_router(variant=variant, lambda_intra=0.0, lambda_inter=0.0, bias_strength=0.0)


def _train_job(args):
    cfg, dataset = args
    rec = train(cfg, dataset)
    rec.model = None
    return rec


def _workers(n_jobs: int) -> int:
    cap = os.environ.get("HIMOE_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def run_many(configs: Sequence[TrainConfig], dataset) -> list[RunRecord]:
    """Train independent runs, in parallel when HIMOE_THREADS (or the CPU count) allows."""
    jobs = [(c, dataset) for c in configs]
    workers = _workers(len(jobs))
    if workers == 1:
        return [_train_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(_train_job, jobs))


SUMMARY_COLUMNS = ("variant", "status", "final_task_loss", "final_expert_cv", "final_group_cv",
                   "final_coverage", "final_collision_mi", "final_accuracy")


def _summary_row(name: str, rec: RunRecord) -> dict:
    if rec.aborted:
        return {"variant": name, "status": f"aborted@{rec.aborted_at}",
                **{c: "" for c in SUMMARY_COLUMNS[2:]}}
    f = rec.final
    return {"variant": name, "status": "ok", "final_task_loss": f["task_loss"],
            "final_expert_cv": f["expert_cv"], "final_group_cv": f["group_cv"],
            "final_coverage": f["coverage_mean"], "final_collision_mi": f["collision_MI"],
            "final_accuracy": f["accuracy"]}


def compare_baselines(cfg: TrainConfig, dataset,
                      variants: Sequence[str] = BASELINE_VARIANTS) -> tuple[list[dict], dict[str, RunRecord]]:
    """One run per variant on the same data and seed; returns (summary rows, records)."""
    configs = [baseline_config(cfg, v) for v in variants]
    records = run_many(configs, dataset)
    rows = [_summary_row(v, r) for v, r in zip(variants, records)]
    return rows, dict(zip(variants, records))


SWEEP_COLUMNS = ("lambda_intra", "lambda_inter", "seeds", "final_task_loss", "final_expert_cv",
                 "final_group_cv", "final_collision_mi", "aborted_runs")


def pareto_sweep(base: TrainConfig, lambda_grid: Sequence[tuple[float, float]], dataset,
                 seeds: Sequence[int] | None = None) -> list[dict]:
    """Final loss, CV and I2 per (lambda_intra, lambda_inter) point, medians over seeds.

    Points are emitted sorted by (lambda_intra, lambda_inter).
    """
    grid = sorted({(float(a), float(b)) for a, b in lambda_grid})
    if not grid:
        raise ValueError("lambda grid is empty")
    seeds = [base.seed] if seeds is None else [int(s) for s in seeds]
    configs = [replace(base.with_router(lambda_intra=a, lambda_inter=b), seed=s)
               for a, b in grid for s in seeds]
    records = run_many(configs, dataset)
    rows = []
    for k, (a, b) in enumerate(grid):
        recs = records[k * len(seeds):(k + 1) * len(seeds)]
        ok = [r for r in recs if not r.aborted]

        def med(key):
            return float(np.median([r.final[key] for r in ok])) if ok else float("nan")

        rows.append({"lambda_intra": a, "lambda_inter": b,
                     "seeds": " ".join(str(s) for s in seeds),
                     "final_task_loss": med("task_loss"), "final_expert_cv": med("expert_cv"),
                     "final_group_cv": med("group_cv"), "final_collision_mi": med("collision_MI"),
                     "aborted_runs": len(recs) - len(ok)})
    return rows


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (row[c] for c in columns)])
    return buf.getvalue()
