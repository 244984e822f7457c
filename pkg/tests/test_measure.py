import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from m3sample.measure import (BoundViolation, CellMeasure, EmpiricalMeasure, decomposition_terms,
                              importance_weighted_risk, measure_from_plan, risk_gap_check,
                              target_measure, tv_distance)


def _simplex(rng, n):
    p = rng.exponential(size=n)
    # sparse supports are the interesting case for TV
    p[rng.random(n) < 0.3] = 0.0
    if p.sum() == 0:
        p[rng.integers(n)] = 1.0
    return p / p.sum()


def test_target_measure_examples():
    np.testing.assert_allclose(target_measure([1, 1, 1, 1]).p, [0.25] * 4)
    np.testing.assert_allclose(target_measure([1, 2, 2, 2], {1: 0.5, 2: 0.5}).p,
                               [0.5, 1 / 6, 1 / 6, 1 / 6])
    labels = [1, 2, 2, 3, 3, 3]
    prop = target_measure(labels, {1: 1 / 6, 2: 2 / 6, 3: 3 / 6})
    np.testing.assert_allclose(prop.p, np.full(6, 1 / 6), rtol=1e-15)


def test_target_measure_errors():
    with pytest.raises(ValueError, match="empty stratum"):
        target_measure([1, 1], {1: 0.5, 2: 0.5})
    with pytest.raises(ValueError, match="negative"):
        target_measure([1, 2], {1: 1.5, 2: -0.5})


def test_tv_examples():
    assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert tv_distance([0.5, 0.5], [1.0, 0.0]) == 0.5
    with pytest.raises(ValueError):
        tv_distance([1.0], [0.5, 0.5])


def test_tv_is_a_metric(rng):
    for _ in range(500):
        n = int(rng.integers(1, 12))
        p, q, r = (_simplex(rng, n) for _ in range(3))
        d = tv_distance(p, q)
        assert 0.0 <= d <= 1.0
        assert d == tv_distance(q, p)
        assert tv_distance(p, p) == 0.0
        assert d > 0 or np.array_equal(p, q)
        assert d <= tv_distance(p, r) + tv_distance(r, q) + 1e-15


def test_decomposition_of_target_is_zero():
    labels = [1, 1, 2, 3, 3, 3]
    star = target_measure(labels)
    assert decomposition_terms(star, labels) == (0.0, 0.0)
    assert tv_distance(star, target_measure(labels)) == 0.0


def test_decomposition_equality_when_uniform_within_strata():
    labels = np.array([1, 1, 2, 3, 3, 3])
    level_mass = {1: 0.6, 2: 0.1, 3: 0.3}
    sizes = {1: 2, 2: 1, 3: 3}
    mu = np.array([level_mass[lv] / sizes[lv] for lv in labels])
    inter, intra = decomposition_terms(mu, labels)
    assert intra == pytest.approx(0.0, abs=1e-15)
    direct = sum(abs(level_mass[lv] - 1 / 3) for lv in (1, 2, 3))
    assert inter == pytest.approx(direct, rel=1e-14)
    assert 2 * tv_distance(mu, target_measure(labels)) == pytest.approx(direct, rel=1e-14)


def test_decomposition_bound_on_random_measures(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 20))
        k = int(rng.integers(1, n + 1))
        labels = rng.permutation(np.r_[np.arange(1, k + 1), rng.integers(1, k + 1, n - k)])
        alpha = dict(zip(range(1, k + 1), _simplex(rng, k).tolist()))
        mu = _simplex(rng, n)
        inter, intra = decomposition_terms(mu, labels, alpha)
        assert 2 * tv_distance(mu, target_measure(labels, alpha)) <= inter + intra + 1e-12


def test_risk_gap_examples():
    mu, star = [0.7, 0.2, 0.1], [0.1, 0.1, 0.8]
    gap, bound = risk_gap_check([3.0, 3.0, 3.0], 5.0, mu, star)
    assert gap == pytest.approx(0.0, abs=1e-15) and bound == pytest.approx(2 * 5 * 0.7)
    assert risk_gap_check([1.0, 4.0, 2.0], 5.0, mu, mu) == (0.0, 0.0)
    with pytest.raises(ValueError, match=r"\[0, 5.0\]"):
        risk_gap_check([6.0, 0.0, 0.0], 5.0, mu, star)


def test_risk_gap_on_random_pairs(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 15))
        big_m = float(rng.exponential()) + 1e-3
        losses = rng.random(n) * big_m
        gap, bound = risk_gap_check(losses, big_m, _simplex(rng, n), _simplex(rng, n))
        assert gap <= bound + 1e-12


def test_risk_gap_indicator_on_two_cells():
    # the indicator of the cell where mu exceeds mu* attains M * TV, half the stated bound
    big_m = 2.0
    mu, star = np.array([0.8, 0.2]), np.array([0.3, 0.7])
    gap, bound = risk_gap_check([big_m, 0.0], big_m, mu, star)
    tv = tv_distance(mu, star)
    assert gap == pytest.approx(big_m * tv, rel=1e-15)
    assert bound == pytest.approx(2 * big_m * tv, rel=1e-15)
    with pytest.raises(BoundViolation):
        risk_gap_check([big_m, 0.0], big_m, mu, star, slack=-0.6 * bound)


def test_importance_weighted_examples():
    losses = np.array([0.3, 1.2, 5.0])
    assert importance_weighted_risk(losses, np.ones(3)) == pytest.approx(losses.mean())
    a, b = 0.7, 4.0
    # mu = (1/2, 1/2), mu_eval = (1, 0): ratios are 2 and 0
    assert importance_weighted_risk([a, b], [2.0, 0.0]) == pytest.approx(a)
    for bad in (np.nan, np.inf, -1.0):
        with pytest.raises(ValueError, match="support"):
            importance_weighted_risk([1.0, 1.0], [1.0, bad])


def test_importance_weighted_converges_on_ten_atoms():
    rng = np.random.default_rng(2024)
    for _ in range(5):
        mu = rng.dirichlet(np.ones(10))
        mu_eval = rng.dirichlet(np.ones(10))
        losses = rng.random(10) * 3
        exact = math.fsum(mu_eval * losses)
        ratio = mu_eval / mu
        second = math.fsum(mu * (ratio * losses) ** 2)
        se = math.sqrt((second - exact ** 2) / 1e5)
        draws = rng.choice(10, size=100_000, p=mu)
        est = importance_weighted_risk(losses[draws], ratio[draws])
        assert abs(est - exact) < 3 * se


def test_measure_from_plan():
    plan = SimpleNamespace(quotas=np.array([1, 1, 2]), m_prime=4)
    np.testing.assert_array_equal(measure_from_plan(plan).p, [0.25, 0.25, 0.5])
    point = measure_from_plan(SimpleNamespace(quotas=np.array([0, 7, 0]), m_prime=7))
    np.testing.assert_array_equal(point.p, [0, 1, 0])
    with pytest.raises(ValueError):
        measure_from_plan(SimpleNamespace(quotas=np.zeros(3), m_prime=0))


@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=200).filter(lambda q: sum(q) > 0))
def test_plan_masses_normalize(quotas):
    p = measure_from_plan(SimpleNamespace(quotas=np.array(quotas), m_prime=sum(quotas))).p
    assert abs(math.fsum(p) - 1.0) <= 1e-12


def test_renormalization_tolerance():
    near = CellMeasure([0.5, 0.5 + 5e-10])
    assert abs(math.fsum(near.p) - 1) <= 1e-12
    with pytest.raises(ValueError, match="not 1"):
        CellMeasure([0.5, 0.5 + 1e-6])
    with pytest.raises(ValueError):
        CellMeasure([1.5, -0.5])


def test_empirical_measure_cell_view():
    em = EmpiricalMeasure([4, 0, 2, 3])
    np.testing.assert_allclose(em.weights, 0.25)
    cell_of_point = np.array([0, 0, 1, 1, 2])
    np.testing.assert_allclose(em.cell_measure(cell_of_point, 3).p, [0.25, 0.5, 0.25])
    assert EmpiricalMeasure([]).m == 0
    with pytest.raises(ValueError):
        EmpiricalMeasure([]).cell_measure(cell_of_point, 3)
