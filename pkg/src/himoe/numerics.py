"""Small numerical kernels shared by the rest of the package.

Everything here works on float64 numpy arrays. Vectors are 1-D arrays, batches
of vectors are 2-D arrays with the vector axis last.

Random numbers come from numpy's ``PCG64`` bit generator seeded through
``SeedSequence``. Both algorithms are fully specified by numpy and produce the
same stream on every platform, so a seed is all that is needed to reproduce a
run. Child streams are derived with ``SeedSequence.spawn`` in a fixed order.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


class NonFiniteError(ValueError):
    """An operation received NaN or infinite input."""


def as_finite(values, name: str = "input") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return arr


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis.

    The maximum logit is subtracted before exponentiating, so adding a constant
    to every logit leaves the result unchanged and large logits cannot overflow.
    """
    if not temperature > 0 or not np.isfinite(temperature):
        raise ValueError(f"temperature must be positive and finite, got {temperature!r}")
    z = as_finite(logits, "logits")
    if temperature != 1.0:
        z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def l2_norm_squared(v) -> np.ndarray | float:
    """Sum of squares along the last axis (a float for 1-D input)."""
    arr = as_finite(v, "vector")
    out = np.einsum("...i,...i->...", arr, arr)
    return float(out) if out.ndim == 0 else out


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    Coordinate ``i`` of the result is ``(f(x + h e_i) - f(x - h e_i)) / (2h)``.
    ``x`` may have any shape; the result has the same shape. If ``f`` returns
    an array, the result has shape ``x.shape + f(x).shape`` (a Jacobian).
    """
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    cols = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig - h
        fm = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise ValueError(f"function returned a non-finite value near coordinate {i}")
        cols.append((fp - fm) / (2.0 * h))
    if not cols:
        return np.zeros(x.shape)
    return np.stack(cols).reshape(x.shape + cols[0].shape)


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for a non-negative 64-bit seed."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` independent child generators; child ``k`` depends only on (seed, k)."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(c)) for c in children]


def random_simplex(rng: np.random.Generator, n: int, size: int | None = None) -> np.ndarray:
    """Uniform draws from the probability simplex via normalized exponentials."""
    shape = (n,) if size is None else (size, n)
    e = rng.standard_exponential(shape)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x: np.ndarray) -> np.ndarray:
    """Tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    return 0.5 * x * (1.0 + t)


def gelu_and_grad(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    value = 0.5 * x * (1.0 + t)
    grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
    return value, grad


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return gelu_and_grad(x)[1]


_GELU_C = float(np.sqrt(2.0 / np.pi))
