"""Grouped MoE residual layer: x+ = x + sum_i pi~_i(x) f_i(x).

Experts are two-layer MLPs ``f_i(x) = gelu(x W1_i + b1_i) W2_i + b2_i`` with the
tanh-form GELU from :mod:`himoe.numerics`. Parameters of all experts are
stored stacked along a leading expert axis so the same container doubles as
the gradient container.

Gradients flow through the retained probabilities pi_i of selected experts;
the Top-K selection itself is treated as a constant.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import gelu, gelu_and_grad, l2_norm_squared
from .router import EmaState, RouterConfig, RoutingOutput, route


@dataclass
class ExpertParams:
    w1: np.ndarray  # (d, d_ff)
    b1: np.ndarray  # (d_ff,)
    w2: np.ndarray  # (d_ff, d)
    b2: np.ndarray  # (d,)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])


@dataclass
class MoEParams:
    router: np.ndarray  # (d, N)
    w1: np.ndarray      # (N, d, d_ff)
    b1: np.ndarray      # (N, d_ff)
    w2: np.ndarray      # (N, d_ff, d)
    b2: np.ndarray      # (N, d)

    FIELDS = ("router", "w1", "b1", "w2", "b2")

    def __post_init__(self):
        d, n = self.router.shape
        ne, d1, d_ff = self.w1.shape
        if (ne, d1) != (n, d):
            raise ValueError("w1 must have shape (N, d, d_ff)")
        if self.b1.shape != (n, d_ff) or self.w2.shape != (n, d_ff, d) or self.b2.shape != (n, d):
            raise ValueError("expert parameter shapes are inconsistent")

    @property
    def d_model(self) -> int:
        return self.router.shape[0]

    @property
    def num_experts(self) -> int:
        return self.router.shape[1]

    @property
    def d_ff(self) -> int:
        return self.w1.shape[2]

    def expert(self, i: int) -> ExpertParams:
        return ExpertParams(self.w1[i], self.b1[i], self.w2[i], self.b2[i])

    def expert_vectors(self) -> np.ndarray:
        """(N, P) matrix of flattened per-expert parameter blocks."""
        n = self.num_experts
        return np.concatenate(
            [self.w1.reshape(n, -1), self.b1, self.w2.reshape(n, -1), self.b2], axis=1
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.FIELDS}

    def copy(self) -> "MoEParams":
        return MoEParams(**{k: v.copy() for k, v in self.arrays().items()})

    @classmethod
    def zeros_like(cls, other: "MoEParams") -> "MoEParams":
        return cls(**{k: np.zeros_like(v) for k, v in other.arrays().items()})


# Gradients share the parameter layout.
LayerGradients = MoEParams


def init_params(d_model: int, num_experts: int, rng: np.random.Generator,
                d_ff: int | None = None) -> MoEParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init; d_ff defaults to 4 d."""
    d_ff = 4 * d_model if d_ff is None else d_ff

    def u(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    n = num_experts
    return MoEParams(
        router=u((d_model, n), d_model),
        w1=u((n, d_model, d_ff), d_model),
        b1=u((n, d_ff), d_model),
        w2=u((n, d_ff, d_model), d_ff),
        b2=u((n, d_model), d_ff),
    )


def expert_forward(x, theta: ExpertParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != theta.w1.shape[0] or theta.w2.shape[1] != x.shape[-1]:
        raise ValueError("input width does not match expert parameters")
    return gelu(x @ theta.w1 + theta.b1) @ theta.w2 + theta.b2


def router_logits(x, params: MoEParams) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) @ params.router


def moe_forward(x, params: MoEParams, cfg: RouterConfig, state: EmaState):
    """Returns (x + MoE(x), routing, updated EMA state).

    Only the experts selected for a token are evaluated on it.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    if xb.shape[1] != params.d_model:
        raise ValueError(f"input width {xb.shape[1]} != model width {params.d_model}")
    if params.num_experts != cfg.num_experts:
        raise ValueError("parameter expert count does not match router config")
    routing, new_state = route(xb @ params.router, state, cfg)
    out = xb.copy()
    for i in range(params.num_experts):
        rows = np.flatnonzero(routing.mask[:, i])
        if rows.size == 0:
            continue
        f = expert_forward(xb[rows], params.expert(i))
        out[rows] += routing.pi_tilde[rows, i, None] * f
    if single:
        routing = RoutingOutput(routing.pi[0], routing.pi_tilde[0], routing.mask[0],
                                routing.group_mass[0])
        out = out[0]
    return out, routing, new_state


def softmax_backward(pi: np.ndarray, d_pi: np.ndarray, temperature: float) -> np.ndarray:
    """Gradient w.r.t. the logits g given the gradient w.r.t. pi = softmax(g / T)."""
    inner = np.sum(pi * d_pi, axis=-1, keepdims=True)
    return pi * (d_pi - inner) / temperature


def moe_backward(x, upstream_grad, params: MoEParams, cfg: RouterConfig,
                 routing: RoutingOutput, pi_grad=None) -> LayerGradients:
    """Parameter gradients of a scalar loss through one layer.

    ``upstream_grad`` is dLoss/d(x+). ``pi_grad`` optionally adds a direct
    dLoss/dpi from routing objectives (load, intra, inter terms). The EMA and
    selection bias are constants of the forward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    up = np.asarray(upstream_grad, dtype=np.float64)
    if x.ndim == 1:
        x, up = x[None], up[None]
        routing = RoutingOutput(routing.pi[None], routing.pi_tilde[None], routing.mask[None],
                                np.atleast_2d(routing.group_mass))
        if pi_grad is not None:
            pi_grad = np.asarray(pi_grad)[None]
    assert routing.pi.shape == (x.shape[0], params.num_experts), "routing/forward mismatch"
    assert up.shape == x.shape

    grads = MoEParams.zeros_like(params)
    d_pi = np.zeros_like(routing.pi) if pi_grad is None else np.array(pi_grad, dtype=np.float64)
    for i in range(params.num_experts):
        rows = np.flatnonzero(routing.mask[:, i])
        if rows.size == 0:
            continue
        xs, us = x[rows], up[rows]
        pre = xs @ params.w1[i] + params.b1[i]
        hid, act_grad = gelu_and_grad(pre)
        f = hid @ params.w2[i] + params.b2[i]
        d_pi[rows, i] += np.einsum("bd,bd->b", us, f)
        d_f = routing.pi_tilde[rows, i, None] * us
        grads.b2[i] = d_f.sum(axis=0)
        grads.w2[i] = hid.T @ d_f
        d_pre = (d_f @ params.w2[i].T) * act_grad
        grads.b1[i] = d_pre.sum(axis=0)
        grads.w1[i] = xs.T @ d_pre
    d_logits = softmax_backward(routing.pi, d_pi, cfg.temperature)
    grads.router = x.T @ d_logits
    return grads


def coupling_from_gradients(pi, grads, clip: float = 1.0):
    """Cross-expert coupling C = sum_{i != j} |<pi_i g_i, pi_j g_j>| and G^2 (1 - ||pi||^2).

    Each row of ``grads`` is scaled down to norm at most ``clip`` first.
    """
    if not clip > 0:
        raise ValueError("clip norm G must be positive")
    pi = np.asarray(pi, dtype=np.float64)
    g = np.array(grads, dtype=np.float64)
    norms = np.linalg.norm(g, axis=1)
    scale = np.where(norms > clip, clip / np.where(norms > 0, norms, 1.0), 1.0)
    g *= scale[:, None]
    weighted = pi[:, None] * g
    gram = np.abs(weighted @ weighted.T)
    coupling = float(gram.sum() - np.trace(gram))
    bound = clip**2 * (1.0 - l2_norm_squared(pi))
    return max(coupling, 0.0), bound


def expert_gradient_coupling(x, params: MoEParams, cfg: RouterConfig, clip: float = 1.0,
                             state: EmaState | None = None, upstream=None):
    """Coupling bound check for one token.

    g_i is the gradient of a shared scalar loss with respect to expert i's
    parameters. Without ``upstream`` the loss is 0.5 ||x+||^2. Unselected
    experts receive no gradient, so their g_i is zero.
    """
    if not clip > 0:
        raise ValueError("clip norm G must be positive")
    state = EmaState.zeros(cfg.num_experts) if state is None else state
    out, routing, _ = moe_forward(x, params, cfg, state)
    up = out if upstream is None else np.asarray(upstream, dtype=np.float64)
    grads = moe_backward(x, up, params, cfg, routing)
    return coupling_from_gradients(routing.pi, grads.expert_vectors(), clip)


# -- checkpoints ------------------------------------------------------------

_MAGIC = b"HIMOE-CKPT 1\n"


def save_checkpoint(path, params: MoEParams, *, seed: int, num_groups: int) -> None:
    """Magic line, one JSON header line, then float64 little-endian blocks.

    Blocks are written row-major in the order router, w1, b1, w2, b2.
    """
    header = {
        "d_model": params.d_model,
        "d_ff": params.d_ff,
        "num_experts": params.num_experts,
        "num_groups": int(num_groups),
        "seed": int(seed),
        "blocks": [[k, list(getattr(params, k).shape)] for k in MoEParams.FIELDS],
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for k in MoEParams.FIELDS:
            fh.write(np.ascontiguousarray(getattr(params, k), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MoEParams, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n", len(_MAGIC))
    header = json.loads(raw[len(_MAGIC):end])
    offset = end + 1
    arrays = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes")
    return MoEParams(**arrays), header
