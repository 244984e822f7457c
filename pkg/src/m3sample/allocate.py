"""Budgeted, capacity-constrained allocation and the without-replacement draw.

The budget is split across levels first (largest remainder with overflow
redistribution), then across the cells of each level by water-filling, and
finally each cell contributes ``q_c`` distinct points drawn by a partial
Fisher-Yates shuffle of its span.  Each cell's draw uses its own Philox
stream keyed by ``(seed, cell key)``, so the result does not depend on the
order in which cells are drawn.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple

import numpy as np
from numba import njit

from .cloud import LabeledPointCloud, compute_bounds, zscore_normalize
from .measure import EmpiricalMeasure
from .morton import SortedIndex, morton_sort
from .partition import Partition, PartitionConfig, build_partition
from .stratify import Stratification, StratifyConfig, assign_strata

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class AllocConfig:
    m: int
    rho: float = 1.0
    alpha: Mapping[int, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.m < 0:
            raise ValueError("budget m must be >= 0")
        if not 0 < self.rho <= 1:
            raise ValueError(f"fill ratio rho must be in (0, 1], got {self.rho}")
        if self.alpha is not None and any(a < 0 for a in self.alpha.values()):
            raise ValueError("alpha must be nonnegative")


@dataclass(frozen=True, eq=False)
class AllocationPlan:
    m_prime: int
    level_budgets: np.ndarray    # index l-1 holds m_l
    level_capacity: np.ndarray   # index l-1 holds C_l
    capacities: np.ndarray       # effective capacity per cell
    quotas: np.ndarray           # q_c per cell
    alpha: dict = field(default_factory=dict)
    alpha_adjusted: bool = False
    rho: float = 1.0


def effective_capacity(n_c, rho: float):
    """``min(N_c, max(1, ceil(rho * N_c)))``; scalar or array."""
    if not 0 < rho <= 1:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    n = np.asarray(n_c, dtype=np.int64)
    cap = np.minimum(n, np.maximum(1, np.ceil(rho * n).astype(np.int64)))
    return int(cap) if cap.ndim == 0 else cap


def _largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    """Integer split of ``total`` proportional to ``shares``; ties go to the lower index."""
    shares = np.asarray(shares, dtype=np.float64)
    s = shares.sum()
    if total == 0 or s <= 0:
        return np.zeros(shares.shape, dtype=np.int64)
    exact = shares / s * total
    base = np.floor(exact).astype(np.int64)
    rest = total - int(base.sum())
    if rest > 0:
        order = np.lexsort((np.arange(shares.size), -(exact - base)))
        base[order[:rest]] += 1
    elif rest < 0:  # floor rounding overshoot; take back from the smallest remainders
        order = np.lexsort((-np.arange(shares.size), exact - base))
        base[order[:-rest]] -= 1
    return base


def allocate_levels(capacities, alpha, m: int) -> np.ndarray:
    """Integer level budgets with ``sum = min(m, sum(C))`` and ``0 <= m_l <= C_l``.

    Start from the largest-remainder split of ``alpha * m'``.  Levels over
    capacity are clamped and the rest of the budget is split again over the
    unsaturated levels in proportion to their alpha.  This repeats until
    nothing overflows; the saturated set only grows, so it terminates.
    """
    cap = np.asarray(capacities, dtype=np.int64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if cap.shape != alpha.shape:
        raise ValueError("capacities and alpha must align")
    if np.any(cap < 0) or np.any(alpha < 0):
        raise ValueError("capacities and alpha must be nonnegative")
    m_prime = min(int(m), int(cap.sum()))
    budgets = np.zeros(cap.shape, dtype=np.int64)
    saturated = cap == 0
    while True:
        free = ~saturated
        remaining = m_prime - int(cap[saturated].sum())
        shares = alpha[free]
        if shares.sum() <= 0:  # leftover budget with no alpha mass: spread by capacity
            shares = cap[free].astype(np.float64)
        budgets[saturated] = cap[saturated]
        budgets[free] = _largest_remainder(remaining, shares)
        over = free & (budgets > cap)
        if not over.any():
            return budgets
        saturated |= over


def water_fill(capacities, m_l: int) -> np.ndarray:
    """Balanced integer quotas under per-cell caps.

    Same result as repeatedly giving one unit to the cell with the lowest
    current quota and spare capacity, ties to the lower index (cells are in
    Morton order, so the lower index is the smaller key).
    """
    cap = np.asarray(capacities, dtype=np.int64)
    m_l = int(m_l)
    if m_l < 0 or m_l > int(cap.sum()):
        raise ValueError(f"level budget {m_l} outside [0, {int(cap.sum())}]")
    if m_l == 0:
        return np.zeros(cap.shape, dtype=np.int64)
    # highest water level t with sum(min(cap, t)) <= m_l
    srt = np.sort(cap)
    prefix = np.concatenate(([0], np.cumsum(srt)))
    lo, hi = 0, int(srt[-1])
    while lo < hi:
        t = (lo + hi + 1) // 2
        k = np.searchsorted(srt, t, side="left")
        if prefix[k] + t * (srt.size - k) <= m_l:
            lo = t
        else:
            hi = t - 1
    quotas = np.minimum(cap, lo)
    rest = m_l - int(quotas.sum())
    if rest:
        room = np.flatnonzero(cap > lo)
        quotas[room[:rest]] += 1
    return quotas


def _resolve_alpha(levels_present: np.ndarray, alpha: Mapping[int, float] | None, n_levels: int):
    vec = np.zeros(n_levels, dtype=np.float64)
    present = np.zeros(n_levels, dtype=bool)
    present[levels_present - 1] = True
    if alpha is None:
        vec[present] = 1.0 / present.sum()
        return vec, False
    for lv, a in alpha.items():
        if 1 <= int(lv) <= n_levels:
            vec[int(lv) - 1] = float(a)
    dropped = bool(vec[~present].sum() > 0)
    vec[~present] = 0.0
    total = vec.sum()
    if total <= 0:
        raise ValueError("alpha puts no mass on any non-empty stratum")
    adjusted = dropped or not math.isclose(total, 1.0, rel_tol=0, abs_tol=1e-12)
    return vec / total, adjusted


def plan_allocation(partition: Partition, strat: Stratification, config: AllocConfig) -> AllocationPlan:
    caps = effective_capacity(partition.n, config.rho)
    labels0 = strat.labels - 1
    level_cap = np.bincount(labels0, weights=caps, minlength=strat.n_levels).astype(np.int64)
    alpha, adjusted = _resolve_alpha(np.unique(strat.labels), config.alpha, strat.n_levels)
    budgets = allocate_levels(level_cap, alpha, config.m)
    m_prime = int(budgets.sum())
    quotas = np.zeros(partition.n_cells, dtype=np.int64)
    for lv in np.flatnonzero(budgets):
        cells = np.flatnonzero(labels0 == lv)
        quotas[cells] = water_fill(caps[cells], budgets[lv])
    return AllocationPlan(
        m_prime=m_prime, level_budgets=budgets, level_capacity=level_cap, capacities=caps,
        quotas=quotas, alpha={int(i + 1): float(a) for i, a in enumerate(alpha) if a > 0},
        alpha_adjusted=adjusted, rho=config.rho)


def fisher_yates_picks(raw: np.ndarray, n: int) -> np.ndarray:
    """Swap targets ``j_i`` in ``[i, n)`` from raw 64-bit stream outputs.

    The top 53 bits of each output form a uniform double ``u`` and
    ``j_i = i + floor(u * (n - i))``.
    """
    i = np.arange(raw.shape[0], dtype=np.int64)
    u = (raw >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return np.minimum(i + np.floor(u * (n - i)).astype(np.int64), n - 1)


def _partial_fisher_yates(bitgen: np.random.BitGenerator, n: int, q: int) -> np.ndarray:
    """First ``q`` entries of a uniformly random permutation of ``range(n)``.

    Reference version of the batched kernel used by :func:`draw_samples`.
    """
    picks = fisher_yates_picks(bitgen.random_raw(q), n)
    swapped: dict[int, int] = {}
    out = np.empty(q, dtype=np.int64)
    for i, j in enumerate(picks.tolist()):
        out[i] = swapped.get(j, j)
        swapped[j] = swapped.get(i, i)
    return out


def cell_stream(seed: int, cell_key: int) -> np.random.Generator:
    """Independent Philox stream for one cell."""
    return np.random.Generator(np.random.Philox(key=[seed & _MASK64, cell_key & _MASK64]))


class _CellStreams:
    """Re-keys one Philox generator per cell; same streams as :func:`cell_stream`.

    Resetting the state of an existing generator is several times cheaper
    than constructing a new one.
    """

    def __init__(self, seed: int):
        self._bitgen = np.random.Philox(key=[seed & _MASK64, 0])
        self._gen = np.random.Generator(self._bitgen)
        self._state = self._bitgen.state

    def _rekey(self, cell_key: int) -> None:
        st = self._state
        st["state"]["counter"][:] = 0
        st["state"]["key"][1] = cell_key & _MASK64
        st["buffer_pos"] = 4
        st["has_uint32"] = 0
        self._bitgen.state = st

    def raw(self, cell_key: int, count: int) -> np.ndarray:
        self._rekey(cell_key)
        return self._bitgen.random_raw(count)

    def __call__(self, cell_key: int) -> np.random.Generator:
        self._rekey(cell_key)
        return self._gen


def draw_samples(plan: AllocationPlan, partition: Partition, sorted_index: SortedIndex,
                 seed: int) -> EmpiricalMeasure:
    """Draw ``q_c`` distinct points from every cell; returns original point indices.

    Cells are visited in Morton order and each cell's picks appear in draw
    order.  A cell drawn in full takes its span in order and consumes no
    randomness.
    """
    if plan.m_prime == 0:
        return EmpiricalMeasure(np.zeros(0, dtype=np.int64))
    cells = np.flatnonzero(plan.quotas)
    q = np.asarray(plan.quotas, dtype=np.int64)[cells]
    out = draw_spans(sorted_index.perm, partition.lo[cells], (partition.hi - partition.lo)[cells], q,
                     partition.anchored_keys()[cells], seed)
    return EmpiricalMeasure(out)


def draw_spans(perm: np.ndarray, lo: np.ndarray, n: np.ndarray, q: np.ndarray,
               keys: np.ndarray | None, seed: int) -> np.ndarray:
    """``q[c]`` distinct entries of ``perm[lo[c]: lo[c] + n[c]]`` for every span ``c``.

    Span ``c`` draws from the stream keyed by ``(seed, keys[c])``.  With
    ``keys=None`` all spans share one stream, consumed in span order.  Spans
    drawn in full consume no randomness.  Output is grouped by span, in draw
    order.
    """
    lo, n, q = (np.asarray(a, dtype=np.int64) for a in (lo, n, q))
    partial = q < n
    raw = np.zeros(int(q.sum()), dtype=np.uint64)
    offsets = np.cumsum(q) - q
    if keys is None:
        shared = cell_stream(seed, 0).bit_generator.random_raw(int(q[partial].sum()))
        raw[np.repeat(partial, q)] = shared
    else:
        streams = _CellStreams(seed)
        for key, off, qc in zip(np.asarray(keys)[partial].tolist(), offsets[partial].tolist(),
                                q[partial].tolist()):
            raw[off: off + qc] = streams.raw(key, qc)
    out = np.empty(raw.shape[0], dtype=np.int64)
    _apply_swaps(np.asarray(perm, dtype=np.int64), lo, n, q, raw, out)
    return out


@njit(cache=True)
def _apply_swaps(perm, lo, n, q, raw, out):
    """Batched partial Fisher-Yates over each cell's span of ``perm``."""
    base = 0
    for c in range(lo.shape[0]):
        if q[c] == n[c]:
            out[base: base + q[c]] = perm[lo[c]: lo[c] + n[c]]
        else:
            scratch = perm[lo[c]: lo[c] + n[c]].copy()
            for i in range(q[c]):
                u = np.float64(raw[base + i] >> np.uint64(11)) * 2.0 ** -53
                j = min(i + np.int64(np.floor(u * (n[c] - i))), n[c] - 1)
                t = scratch[j]
                scratch[j] = scratch[i]
                scratch[i] = t
                out[base + i] = t
        base += q[c]


class M3Result(NamedTuple):
    partition: Partition
    stratification: Stratification
    plan: AllocationPlan
    measure: EmpiricalMeasure
    sorted_index: SortedIndex


def m3_sample(cloud: LabeledPointCloud, m: int, seed: int,
              partition_config: PartitionConfig = PartitionConfig(),
              stratify_config: StratifyConfig = StratifyConfig(),
              rho: float = 1.0, alpha: Mapping[int, float] | None = None,
              normalize: bool = True) -> M3Result:
    """Full pipeline: normalize, sort, partition, stratify, allocate, draw."""
    alloc = AllocConfig(m=m, rho=rho, alpha=alpha, seed=seed)
    if normalize:
        cloud = zscore_normalize(cloud)
    cube = compute_bounds(cloud)
    sorted_index = morton_sort(cloud, cube)
    partition = build_partition(cloud, sorted_index, partition_config, cube)
    strat = assign_strata(partition, stratify_config)
    plan = plan_allocation(partition, strat, alloc)
    measure = draw_samples(plan, partition, sorted_index, seed)
    return M3Result(partition, strat, plan, measure, sorted_index)


def write_measure(measure: EmpiricalMeasure, plan: AllocationPlan | None, seed: int, path,
                  text_path=None, extra: dict | None = None) -> dict:
    """Binary u64 index array, JSON sidecar, and optional one-per-line text."""
    path = Path(path)
    measure.indices.astype("<u8").tofile(path)
    sidecar = {"m_prime": int(measure.m), "seed": int(seed)}
    if plan is not None:
        sidecar.update({
            "per_level": [{"level": i + 1, "m_l": int(b)} for i, b in enumerate(plan.level_budgets)
                          if plan.level_capacity[i] > 0],
            "rho": plan.rho,
            "alpha": {str(k): v for k, v in plan.alpha.items()},
            "alpha_adjusted": plan.alpha_adjusted,
        })
    if extra:
        sidecar.update(extra)
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))
    if text_path is not None:
        Path(text_path).write_text("".join(f"{i}\n" for i in measure.indices.tolist()))
    return sidecar


def read_indices(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".txt":
        text = path.read_text().split()
        return np.asarray([int(t) for t in text], dtype=np.int64)
    return np.fromfile(path, dtype="<u8").astype(np.int64)
