import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from himoe import theory
from himoe.metrics import collision_mutual_information
from himoe.numerics import make_rng, random_simplex
from himoe.router import GroupPartition


@pytest.mark.parametrize("name,fn", theory.SUITES)
def test_each_suite_passes(name, fn):
    report = fn(500, make_rng(99))
    assert report.passed, report
    assert report.samples >= 500 and report.violations == 0
    assert report.max_violation_magnitude <= report.tolerance


def test_run_all_small_and_deterministic():
    a = theory.run_all(samples=1, seed=3)
    b = theory.run_all(samples=1, seed=3)
    assert len(a) == 6 and all(r.passed for r in a)
    assert theory.report_json(a, 3, 1) == theory.report_json(b, 3, 1)
    doc = json.loads(theory.report_json(a, 3, 1))
    assert doc["total_properties"] == 6 and doc["all_passed"] and doc["seed"] == 3
    assert {p["property_name"] for p in doc["properties"]} == {
        "cv_l2_identity", "group_sum_bound", "inter_group_bound", "gradient_coupling_bound",
        "collision_mutual_information", "lagrangian_constant"}
    with pytest.raises(ValueError):
        theory.run_all(samples=0)


def test_report_passed_iff_no_violations():
    assert theory.PropertyReport("x", 10, 0, 0.0, 1e-12).passed
    r = theory.PropertyReport("x", 10, 1, 1e-3, 1e-12)
    assert not r.passed and r.as_dict()["passed"] is False


def test_violations_are_detected(monkeypatch):
    monkeypatch.setattr(theory.metrics, "cv_l2_identity_gap", lambda L: 1e-9)
    report = theory.verify_cv_l2(20, make_rng(0))
    assert not report.passed and report.violations == report.samples
    assert report.max_violation_magnitude == 1e-9


def test_group_sum_examples():
    part = GroupPartition.from_sizes([2, 2])
    w = np.array([4 / 7, 0, 3 / 7, 0])
    m = w @ part.membership()
    assert abs(m @ m - 25 / 49) < 1e-15 and abs(part.s_max * (w @ w) - 50 / 49) < 1e-15
    # equal entries inside the largest group: Cauchy-Schwarz is tight
    assert abs(theory._group_sum_excess(np.array([0.5, 0.5, 0, 0]), part)) < 1e-15


@given(st.integers(0, 2**32 - 1), st.integers(1, 24))
def test_group_sum_bound_property(seed, n):
    rng = np.random.default_rng(seed)
    part = theory.random_partition(rng, n, int(rng.integers(1, n + 1)))
    w = rng.uniform(0, 1, n)
    assert theory._group_sum_excess(w, part) <= 1e-12


@given(st.integers(0, 2**32 - 1))
def test_random_partition_is_valid(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    m = int(rng.integers(1, n + 1))
    part = theory.random_partition(rng, n, m)
    assert part.num_groups == m
    assert sorted(e for g in part.groups for e in g) == list(range(n))


def test_inter_bound_equality_cases():
    from himoe.router import RouterConfig
    cfg = RouterConfig(num_experts=4, partition=GroupPartition.equal(4, 2), k_per_group=1)
    jensen, lemma, identity = theory._inter_excess(np.tile([0.4, 0.1, 0.3, 0.2], (5, 1)), cfg)
    assert abs(jensen) < 1e-15 and identity < 1e-12 and lemma <= 0
    jensen, lemma, identity = theory._inter_excess(np.full((5, 4), 0.25), cfg)
    assert identity < 1e-15


@given(st.integers(0, 2**32 - 1), st.integers(2, 10), st.integers(1, 6))
def test_symmetrize_balances_marginals(seed, n, tokens):
    pis = random_simplex(np.random.default_rng(seed), n, size=tokens)
    sym = theory.symmetrize(pis)
    assert sym.shape == (n * tokens, n)
    assert np.allclose(sym.mean(axis=0), 1 / n, atol=1e-15)
    e = np.mean(np.sum(sym**2, axis=1))
    assert abs(collision_mutual_information(sym) - np.log(n * e)) <= 1e-12


def test_overlap_identity_brute_force():
    assert theory.check_overlap_identity([0.25] * 4) < 1e-16
    assert theory.check_overlap_identity(random_simplex(make_rng(1), 50)) < 1e-12
