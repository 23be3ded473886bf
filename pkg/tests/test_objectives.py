import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from himoe import objectives as obj
from himoe.numerics import finite_difference_gradient, random_simplex
from himoe.router import GroupPartition, RouterConfig, flat_topk, grouped_topk


def test_task_loss_examples():
    big = 50.0
    logits = np.array([[big, 0.0, 0.0], [0.0, big, 0.0]])
    assert obj.task_loss(logits, [0, 1]) < 1e-20
    assert abs(obj.task_loss(np.zeros((4, 5)), [0, 1, 2, 3]) - np.log(5)) < 1e-15
    two = np.log(np.array([[0.8, 0.2], [0.2, 0.8]]))
    assert abs(obj.task_loss(two, [0, 1]) - 0.2231435513142097) < 1e-15
    with pytest.raises(ValueError):
        obj.task_loss(np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        obj.task_loss(np.zeros((2, 3)), [0, 3])


def test_task_loss_grad_matches_fd(rng):
    z, y = rng.normal(size=(4, 3)), np.array([0, 2, 1, 1])
    fd = finite_difference_gradient(lambda v: obj.task_loss(v, y), z)
    assert np.allclose(obj.task_loss_grad(z, y), fd, atol=1e-10)


def test_load_balance_examples():
    mask = np.array([[True, False], [True, False]])
    pi = np.array([[0.8, 0.2], [0.6, 0.4]])
    stats = obj.BatchStats.from_routing(mask, pi)
    assert np.array_equal(stats.h, [1.0, 0.0]) and np.allclose(stats.P, [0.7, 0.3])
    assert abs(obj.load_balance_loss(stats, 0.01, 2) - 0.014) < 1e-15
    n = 5
    uniform = obj.BatchStats.from_routing(np.eye(n, dtype=bool), np.full((n, n), 1 / n))
    assert abs(obj.load_balance_loss(uniform, 0.3, n) - 0.3) < 1e-15
    assert obj.load_balance_loss(stats, 0.0, 2) == 0.0
    with pytest.raises(ValueError):
        obj.load_balance_loss(stats, 0.01, 3)
    with pytest.raises(ValueError):
        obj.BatchStats.from_routing(mask[:1], pi)


def test_regularizer_examples():
    assert abs(obj.inter_regularizer([0.4, 0, 0.3, 0], 0.05) - 0.0125) < 1e-16
    assert obj.inter_regularizer([0, 1.0, 0], 1.0) == 1.0
    assert obj.inter_regularizer([0.4, 0, 0.3, 0], 0.0) == 0.0
    assert abs(obj.intra_regularizer([0.4, 0.1, 0.3, 0.2], 0.1) + 0.03) < 1e-16
    assert abs(obj.intra_regularizer(np.full(8, 1 / 8), 1.0) + 1 / 8) < 1e-16
    assert obj.intra_regularizer([0, 0, 1.0], 1.0) == -1.0
    for f in (obj.inter_regularizer, obj.intra_regularizer):
        with pytest.raises(ValueError):
            f([0.5, 0.5], -0.1)
    with pytest.raises(ValueError):
        obj.inter_regularizer([0.5, -0.1], 0.1)


def test_total_and_lagrangian_examples():
    assert abs(obj.total_objective(1.0, 0.014, -0.03, 0.0125) - 0.9965) < 1e-15
    assert obj.total_objective(0.0, 0.0, 0.0, 0.0) == 0.0
    with pytest.raises(ValueError):
        obj.total_objective(np.nan, 0, 0, 0)
    pi = np.array([0.4, 0.1, 0.3, 0.2])
    pt = np.array([0.4, 0, 0.3, 0])
    lag = obj.lagrangian_form(1.0, 0.014, pi, pt, lambda_intra=0.1, lambda_inter=0.05)
    assert abs(lag - 1.0965) < 1e-15


@given(st.integers(0, 2**32 - 1), st.floats(0, 5), st.floats(0, 5), st.floats(-10, 10),
       st.floats(0, 10))
def test_lagrangian_constant(seed, l_intra, l_inter, task, load):
    rng = np.random.default_rng(seed)
    pi = random_simplex(rng, 6, size=4)
    pt = flat_topk(pi, 2).pi_tilde
    total = obj.total_objective(task, load, obj.intra_regularizer(pi, l_intra),
                                obj.inter_regularizer(pt, l_inter))
    lag = obj.lagrangian_form(task, load, pi, pt, l_intra, l_inter)
    assert abs(lag - total - l_intra) <= 1e-12 * max(1.0, abs(total))
    if l_intra == 0:
        assert abs(lag - total) <= 1e-12 * max(1.0, abs(total))


@given(st.integers(0, 2**32 - 1), st.integers(1, 4), st.integers(1, 30))
def test_h_sums_to_k_for_grouped(seed, m, batch):
    rng = np.random.default_rng(seed)
    cfg = RouterConfig(num_experts=2 * m, partition=GroupPartition.equal(2 * m, m), k_per_group=1)
    out = grouped_topk(random_simplex(rng, 2 * m, size=batch), cfg)
    stats = obj.BatchStats.from_routing(out.mask, out.pi)
    assert out.mask.sum() == m * batch  # integer selection counts are exact
    assert abs(stats.h.sum() - m) <= 1e-12  # h = count / B carries rounding
    assert abs(stats.P.sum() - 1) < 1e-12
    assert np.all((0 <= stats.h) & (stats.h <= 1))


@given(st.integers(0, 2**32 - 1), st.integers(2, 10), st.integers(1, 40))
def test_load_lower_bound_when_h_equals_p(seed, n, batch):
    # for K = 1 and h == P, alpha N ||P||^2 >= alpha with equality at uniform P
    p = random_simplex(np.random.default_rng(seed), n)
    stats = obj.BatchStats(h=p, P=p, token_count=batch)
    assert obj.load_balance_loss(stats, 1.0, n) >= 1.0 - 1e-12


@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 20))
def test_batch_stats_merge_is_associative(seed, a, b):
    rng = np.random.default_rng(seed)
    pis = random_simplex(rng, 4, size=a + b + 3)
    masks = flat_topk(pis, 2).mask
    parts = [obj.BatchStats.from_routing(masks[s], pis[s])
             for s in (slice(0, a), slice(a, a + b), slice(a + b, None))]
    left = parts[0].merge(parts[1]).merge(parts[2])
    right = parts[0].merge(parts[1].merge(parts[2]))
    whole = obj.BatchStats.from_routing(masks, pis)
    for s in (left, right):
        assert s.token_count == whole.token_count
        assert np.allclose(s.h, whole.h, atol=1e-14) and np.allclose(s.P, whole.P, atol=1e-14)


def test_routing_term_gradients_match_fd(rng):
    pi = random_simplex(rng, 5, size=3)
    mask = flat_topk(pi, 2).mask
    stats = obj.BatchStats.from_routing(mask, pi)
    cases = [
        (lambda p: obj.load_balance_loss(obj.BatchStats(stats.h, p.mean(0), 3), 0.2, 5),
         obj.load_balance_grad(stats, 0.2, 5)),
        (lambda p: obj.intra_regularizer(p, 0.3), obj.intra_regularizer_grad(pi, 0.3)),
        (lambda p: obj.inter_regularizer(np.where(mask, p, 0.0), 0.4),
         obj.inter_regularizer_grad(np.where(mask, pi, 0.0), 0.4)),
    ]
    for f, analytic in cases:
        assert np.allclose(finite_difference_gradient(f, pi), analytic, atol=1e-10)
