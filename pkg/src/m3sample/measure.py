"""Discrete measures over cells and points, and the diagnostics built on them.

Cell measures are dense mass vectors over the partition's cells.  Point
measures (:class:`EmpiricalMeasure`) are sparse: selected indices with
weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

NORM_TOL = 1e-12
RENORM_TOL = 1e-9


class BoundViolation(ArithmeticError):
    """A bound that must hold analytically failed numerically."""


def _as_simplex(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("mass vector must be a non-empty 1-d array")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("masses must be finite and >= 0")
    total = math.fsum(p)
    if abs(total - 1.0) > RENORM_TOL:
        raise ValueError(f"masses sum to {total!r}, not 1")
    if abs(total - 1.0) > NORM_TOL:
        p = p / total
    return p


@dataclass(frozen=True, eq=False)
class CellMeasure:
    """Mass vector over cells; ``labels`` (optional) gives each cell's level."""

    p: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "p", _as_simplex(self.p))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != self.p.shape:
                raise ValueError("labels must align with the mass vector")
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.p.shape[0]

    def level_mass(self, labels=None) -> dict[int, float]:
        labels = self.labels if labels is None else np.asarray(labels)
        return {int(lv): math.fsum(self.p[labels == lv]) for lv in np.unique(labels)}


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Point measure: distinct support indices with weights summing to one.

    An empty support (budget 0) is allowed and carries no mass.
    """

    indices: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", idx)
        if self.weights is None:
            w = np.full(idx.shape[0], 1.0 / idx.shape[0]) if idx.size else np.zeros(0)
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != idx.shape:
                raise ValueError("weights must align with indices")
            if idx.size:
                w = _as_simplex(w)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def m(self) -> int:
        return self.indices.shape[0]

    def cell_measure(self, cell_of_point: np.ndarray, n_cells: int, labels=None) -> CellMeasure:
        """Push the point masses forward onto cells."""
        if self.m == 0:
            raise ValueError("empty measure has no cell view")
        p = np.bincount(cell_of_point[self.indices], weights=self.weights, minlength=n_cells)
        return CellMeasure(p, labels)


def target_measure(labels, alpha: Mapping[int, float] | None = None) -> CellMeasure:
    """Mass ``alpha[l] / |C_l|`` on every cell of level ``l``.

    ``alpha`` defaults to uniform over the non-empty levels.
    """
    labels = np.asarray(labels, dtype=np.int64)
    levels, sizes = np.unique(labels, return_counts=True)
    if alpha is None:
        alpha = {int(lv): 1.0 / levels.size for lv in levels}
    present = set(int(lv) for lv in levels)
    for lv, a in alpha.items():
        if a < 0:
            raise ValueError(f"alpha for level {lv} is negative")
        if a > 0 and int(lv) not in present:
            raise ValueError(f"alpha puts mass {a} on empty stratum {lv}")
    size = dict(zip(levels.tolist(), sizes.tolist()))
    per_cell = np.asarray([alpha.get(int(lv), 0.0) / size[int(lv)] for lv in labels])
    return CellMeasure(per_cell, labels)


def _mass(mu) -> np.ndarray:
    return mu.p if isinstance(mu, CellMeasure) else np.asarray(mu, dtype=np.float64)


def tv_distance(p, q) -> float:
    """Total variation between two mass vectors on the same cells."""
    a, b = _mass(p), _mass(q)
    if a.shape != b.shape:
        raise ValueError("measures live on different cell sets")
    return 0.5 * math.fsum(np.abs(a - b))


def decomposition_terms(mu, labels, alpha: Mapping[int, float] | None = None) -> tuple[float, float]:
    """Inter-level mass gap and intra-level imbalance of ``mu``.

    Their sum bounds ``2 * TV(mu, target_measure(labels, alpha))``.
    """
    p = _mass(mu)
    labels = np.asarray(labels, dtype=np.int64)
    levels = np.unique(labels)
    if alpha is None:
        alpha = {int(lv): 1.0 / levels.size for lv in levels}
    inter, intra = [], []
    for lv in levels:
        in_level = p[labels == lv]
        mass = math.fsum(in_level)
        inter.append(abs(mass - alpha.get(int(lv), 0.0)))
        intra.append(math.fsum(np.abs(in_level - mass / in_level.size)))
    # alpha mass on levels without cells is counted as inter-level gap
    inter += [abs(a) for lv, a in alpha.items() if int(lv) not in set(levels.tolist())]
    return math.fsum(inter), math.fsum(intra)


def risk_gap_check(losses, bound_m: float, mu, mu_star, slack: float = 1e-12) -> tuple[float, float]:
    """Risk difference between two cell measures and its TV bound ``2 M TV``.

    Raises :class:`BoundViolation` if the gap exceeds the bound by more than
    ``slack``.
    """
    losses = np.asarray(losses, dtype=np.float64)
    p, q = _mass(mu), _mass(mu_star)
    if losses.shape != p.shape:
        raise ValueError("losses must align with the cell masses")
    support = (p > 0) | (q > 0)
    ls = losses[support]
    if np.any(~np.isfinite(ls)) or np.any(ls < 0) or np.any(ls > bound_m):
        raise ValueError(f"losses must lie in [0, {bound_m}] on the joint support")
    gap = abs(math.fsum(p * losses) - math.fsum(q * losses))
    bound = 2.0 * bound_m * tv_distance(p, q)
    if gap > bound + slack:
        raise BoundViolation(f"risk gap {gap!r} exceeds 2*M*TV = {bound!r}")
    return gap, bound


def importance_weighted_risk(losses, ratios) -> float:
    """Mean of ``ratio * loss`` over samples drawn under the sampling measure.

    ``ratios`` are density ratios d(mu_eval)/d(mu) at the samples; a NaN,
    infinite or negative ratio means mu_eval is not absolutely continuous
    with respect to mu.
    """
    losses = np.asarray(losses, dtype=np.float64)
    ratios = np.asarray(ratios, dtype=np.float64)
    if losses.shape != ratios.shape or losses.ndim != 1:
        raise ValueError("losses and ratios must be 1-d arrays of equal length")
    if losses.size == 0:
        raise ValueError("no samples")
    if not np.all(np.isfinite(ratios)) or np.any(ratios < 0):
        raise ValueError("density ratio is not finite and nonnegative: support violation")
    return math.fsum(ratios * losses) / losses.size


def measure_from_plan(plan) -> CellMeasure:
    """Cell masses ``q_c / m'`` of an allocation plan."""
    if plan.m_prime <= 0:
        raise ValueError("plan has zero realized budget")
    return CellMeasure(np.asarray(plan.quotas, dtype=np.float64) / plan.m_prime)
