import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fake_partition, partition_of
from m3sample.allocate import (AllocConfig, _partial_fisher_yates, allocate_levels, cell_stream,
                               draw_samples, effective_capacity, fisher_yates_picks, m3_sample,
                               plan_allocation, read_indices, water_fill, write_measure)
from m3sample.cloud import LabeledPointCloud
from m3sample.measure import measure_from_plan
from m3sample.morton import SortedIndex
from m3sample.partition import PartitionConfig
from m3sample.stratify import StratifyConfig, assign_strata
from m3sample.synth import generate_cloud
from oracles import water_fill_naive


def test_effective_capacity_examples():
    assert effective_capacity(1, 0.01) == 1
    assert effective_capacity(100, 0.1) == 10
    assert effective_capacity(7, 1.0) == 7
    np.testing.assert_array_equal(effective_capacity([1, 3, 10], 0.5), [1, 2, 5])
    with pytest.raises(ValueError):
        effective_capacity(5, 0.0)


@given(st.integers(1, 10**6), st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_effective_capacity_monotone_in_rho(n, r1, r2):
    lo, hi = sorted((r1, r2))
    assert 1 <= effective_capacity(n, lo) <= effective_capacity(n, hi) <= n


def test_allocate_levels_examples():
    assert allocate_levels([10, 10, 10], [1 / 3] * 3, 9).tolist() == [3, 3, 3]
    assert allocate_levels([10, 3, 4], [1 / 3] * 3, 100).tolist() == [10, 3, 4]


def test_allocate_levels_matches_exhaustive_search():
    caps, alpha, m = [2, 10, 10], np.full(3, 1 / 3), 12
    m_prime = min(m, sum(caps))
    feasible = [t for t in itertools.product(*(range(c + 1) for c in caps)) if sum(t) == m_prime]
    dev = lambda t: (max(abs(x - a * m_prime) for x, a in zip(t, alpha)),  # noqa: E731
                     sum((x - a * m_prime) ** 2 for x, a in zip(t, alpha)))
    best = min(feasible, key=dev)
    assert best == (2, 5, 5)
    assert tuple(allocate_levels(caps, alpha, m).tolist()) == best


@settings(max_examples=300)
@given(st.lists(st.tuples(st.integers(0, 50), st.floats(0, 1)), min_size=1, max_size=12),
       st.integers(0, 400))
def test_allocate_levels_constraints(levels, m):
    caps = np.array([c for c, _ in levels])
    alpha = np.array([a for _, a in levels])
    if alpha.sum() == 0:
        alpha = alpha + 1.0
    b = allocate_levels(caps, alpha / alpha.sum(), m)
    assert b.sum() == min(m, caps.sum())
    assert np.all((0 <= b) & (b <= caps))


def test_water_fill_examples():
    assert water_fill([5, 5, 5], 3).tolist() == [1, 1, 1]
    assert water_fill([1, 10], 6).tolist() == [1, 5]
    assert water_fill([5, 5, 5], 7).tolist() == [3, 2, 2]
    assert water_fill([5, 5, 5], 7).tolist() == water_fill_naive([5, 5, 5], 7)
    with pytest.raises(ValueError):
        water_fill([1, 1], 3)


@settings(max_examples=300)
@given(st.lists(st.integers(0, 20), min_size=1, max_size=15), st.data())
def test_water_fill_matches_lowest_first_simulation(caps, data):
    m = data.draw(st.integers(0, sum(caps)))
    q = water_fill(caps, m)
    assert q.tolist() == water_fill_naive(caps, m)
    unsat = q[q < np.asarray(caps)]
    assert unsat.size == 0 or unsat.max() - unsat.min() <= 1


def test_fisher_yates_picks_stay_in_range():
    raw = np.array([0, 2**64 - 1, 2**63, 12345], dtype=np.uint64)
    picks = fisher_yates_picks(raw, 4)
    assert picks.tolist() == [0, 3, 3, 3]
    assert np.all(picks >= np.arange(4))


def test_partial_fisher_yates_is_uniform():
    n, q, trials = 10, 3, 20_000
    counts = np.zeros(n)
    first = np.zeros(n)
    for s in range(trials):
        out = _partial_fisher_yates(cell_stream(s, 99).bit_generator, n, q)
        assert len(set(out.tolist())) == q
        counts[out] += 1
        first[out[0]] += 1
    p = q / n
    assert np.all(np.abs(counts - trials * p) < 4 * np.sqrt(trials * p * (1 - p)))
    assert np.all(np.abs(first - trials / n) < 4 * np.sqrt(trials * 0.1 * 0.9))


def _plan(n, quotas):
    n = np.asarray(n)
    part = fake_partition(n)
    strat = assign_strata(part, StratifyConfig(K=2))
    plan = plan_allocation(part, strat, AllocConfig(m=0))
    from dataclasses import replace
    return part, replace(plan, quotas=np.asarray(quotas), m_prime=int(np.sum(quotas)))


def test_draw_exhaustive_and_empty():
    n = [3, 5, 2]
    perm = np.random.default_rng(0).permutation(10)
    si = SortedIndex(perm, np.arange(10, dtype=np.uint64))
    part, plan = _plan(n, n)
    assert sorted(draw_samples(plan, part, si, 7).indices.tolist()) == list(range(10))
    part, plan = _plan(n, [0, 0, 0])
    assert draw_samples(plan, part, si, 7).m == 0


def test_draw_matches_reference_and_is_deterministic():
    n = [40, 1, 17, 300, 8]
    q = [5, 1, 17, 120, 0]
    perm = np.random.default_rng(1).permutation(sum(n))
    si = SortedIndex(perm, np.arange(sum(n), dtype=np.uint64))
    part, plan = _plan(n, q)
    for seed in (0, 1, 2**40 + 3):
        got = draw_samples(plan, part, si, seed).indices
        np.testing.assert_array_equal(got, draw_samples(plan, part, si, seed).indices)
        keys = part.anchored_keys()
        expected = []
        for c in range(len(n)):
            lo = int(part.lo[c])
            if q[c] == 0:
                continue
            if q[c] == n[c]:
                local = np.arange(n[c])
            else:
                local = _partial_fisher_yates(cell_stream(seed, int(keys[c])).bit_generator, n[c], q[c])
            expected.extend(perm[lo + local].tolist())
        assert got.tolist() == expected
        assert len(set(got.tolist())) == sum(q)


def test_m3_saturation_returns_every_point_once():
    cloud = generate_cloud("radial-bump", 3000, 5)
    res = m3_sample(cloud, 10**6, 0, PartitionConfig(eps_refine=0.05, g_max=8), rho=1.0)
    assert sorted(res.measure.indices.tolist()) == list(range(3000))


def test_m3_constant_field_collapses_to_uniform_sampling(rng):
    cloud = LabeledPointCloud(rng.random((5000, 3)), {"p": np.ones(5000)})
    res = m3_sample(cloud, 200, 3)
    assert res.partition.n_cells == 1
    assert np.unique(res.stratification.labels).size == 1
    assert res.measure.m == 200 and np.unique(res.measure.indices).size == 200


def test_m3_realized_level_counts_match_plan():
    cloud = generate_cloud("boundary-layer", 60_000, 4)
    res = m3_sample(cloud, 4096, 9, PartitionConfig(eps_refine=0.005, g_max=13), rho=0.5)
    cell = res.partition.cell_of_point(res.sorted_index)
    labels = res.stratification.labels[cell[res.measure.indices]]
    realized = np.bincount(labels - 1, minlength=res.stratification.n_levels)
    np.testing.assert_array_equal(realized, res.plan.level_budgets)
    per_cell = np.bincount(cell[res.measure.indices], minlength=res.partition.n_cells)
    np.testing.assert_array_equal(per_cell, res.plan.quotas)
    view = res.measure.cell_measure(cell, res.partition.n_cells)
    np.testing.assert_allclose(view.p, measure_from_plan(res.plan).p, rtol=0, atol=1e-15)


def test_m3_is_deterministic():
    cloud = generate_cloud("boundary-layer", 20_000, 0)
    a = m3_sample(cloud, 1000, 42).measure.indices
    b = m3_sample(cloud, 1000, 42).measure.indices
    c = m3_sample(cloud, 1000, 43).measure.indices
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(np.sort(a), np.sort(c))


def test_plan_constraints_and_balance_on_real_partition():
    cloud = generate_cloud("boundary-layer", 40_000, 1)
    part, *_ = partition_of(cloud, eps_refine=0.005, g_max=13)
    strat = assign_strata(part)
    for rho in (1.0, 0.5, 0.25):
        plan = plan_allocation(part, strat, AllocConfig(m=3000, rho=rho))
        assert plan.m_prime == min(3000, int(plan.capacities.sum()))
        assert int(plan.level_budgets.sum()) == plan.m_prime
        assert np.all(plan.level_budgets <= plan.level_capacity)
        assert np.all((plan.quotas >= 0) & (plan.quotas <= plan.capacities))
        for lv in np.unique(strat.labels):
            cells = strat.labels == lv
            assert plan.quotas[cells].sum() == plan.level_budgets[lv - 1]
            q, cap = plan.quotas[cells], plan.capacities[cells]
            unsat = q[q < cap]
            assert unsat.size == 0 or unsat.max() - unsat.min() <= 1


def test_decreasing_rho_spreads_quotas():
    cloud = generate_cloud("boundary-layer", 40_000, 2)
    part, *_ = partition_of(cloud, eps_refine=0.005, g_max=13)
    strat = assign_strata(part)
    prev_caps, prev_cells = None, -1
    for rho in (1.0, 0.5, 0.25, 0.1):
        plan = plan_allocation(part, strat, AllocConfig(m=4000, rho=rho))
        assert plan.capacities.sum() >= 4000
        if prev_caps is not None:
            assert np.all(plan.capacities <= prev_caps)
        cells = int(np.count_nonzero(plan.quotas))
        assert cells >= prev_cells
        prev_caps, prev_cells = plan.capacities, cells


def test_alpha_on_empty_stratum_is_renormalized_and_recorded(tmp_path):
    part = fake_partition([4, 4, 1], delta=[0.0, 1.0, 0.0])
    strat = assign_strata(part, StratifyConfig(K=3))
    present = sorted(set(strat.labels.tolist()))
    assert 2 not in present
    alpha = {present[0]: 0.25, 2: 0.5, present[-1]: 0.25}
    plan = plan_allocation(part, strat, AllocConfig(m=4, alpha=alpha))
    assert plan.alpha_adjusted
    assert plan.alpha == {present[0]: 0.5, present[-1]: 0.5}
    assert plan.m_prime == 4
    si = SortedIndex(np.arange(9), np.arange(9, dtype=np.uint64))
    measure = draw_samples(plan, part, si, 3)
    side = write_measure(measure, plan, 3, tmp_path / "idx.u64", tmp_path / "idx.txt")
    on_disk = json.loads((tmp_path / "idx.u64.json").read_text())
    assert on_disk == json.loads(json.dumps(side))
    assert on_disk["m_prime"] == 4 and on_disk["seed"] == 3 and on_disk["alpha_adjusted"] is True
    assert {"level", "m_l"} <= set(on_disk["per_level"][0])
    np.testing.assert_array_equal(read_indices(tmp_path / "idx.u64"), measure.indices)
    np.testing.assert_array_equal(read_indices(tmp_path / "idx.txt"), measure.indices)


def test_alloc_config_validation():
    with pytest.raises(ValueError):
        AllocConfig(m=-1)
    with pytest.raises(ValueError):
        AllocConfig(m=1, rho=1.5)
    with pytest.raises(ValueError):
        AllocConfig(m=1, alpha={1: -0.1})
