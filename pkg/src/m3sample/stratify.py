"""Scale stratification of partition cells.

Multi-point cells get the intensity ``S = log(eps_log + delta / h)`` and are
binned into ``K`` equal-width bins over a percentile-clipped range of S.
One-point cells carry no usable variation signal and go to level ``K + 1``.
Levels are numbered from 1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .partition import Partition


@dataclass(frozen=True)
class StratifyConfig:
    K: int = 64
    eps_log: float = 1e-12
    p_lo: float = 0.0
    p_hi: float = 99.5

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be >= 2, got {self.K}")
        if not self.eps_log > 0:
            raise ValueError("eps_log must be > 0")
        if not 0 <= self.p_lo < self.p_hi <= 100:
            raise ValueError("need 0 <= p_lo < p_hi <= 100")


def cell_intensity(delta, h, eps_log: float = 1e-12):
    """Gradient-scale intensity ``log(eps_log + delta / h)`` (natural log)."""
    return np.log(eps_log + np.asarray(delta, dtype=np.float64) / np.asarray(h, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class Stratification:
    labels: np.ndarray          # per cell, in 1..K+1
    K: int
    edges: np.ndarray           # K+1 bin edges on S; NaN when no multi-point cell exists
    intensity: np.ndarray       # S per cell, NaN for singletons
    cell_points: np.ndarray     # N_c per cell

    @property
    def n_levels(self) -> int:
        return self.K + 1

    @property
    def singleton_level(self) -> int:
        return self.K + 1

    def stratum(self, level: int) -> np.ndarray:
        return np.flatnonzero(self.labels == level)

    @property
    def strata(self) -> dict[int, np.ndarray]:
        """Non-empty strata keyed by level."""
        return {int(lv): self.stratum(lv) for lv in np.unique(self.labels)}

    def cells_per_level(self) -> np.ndarray:
        """Cell counts for levels 1..K+1 (index 0 is level 1)."""
        return np.bincount(self.labels - 1, minlength=self.n_levels)

    def points_per_level(self) -> np.ndarray:
        return np.bincount(self.labels - 1, weights=self.cell_points,
                           minlength=self.n_levels).astype(np.int64)


def _bin(values: np.ndarray, s_min: float, s_max: float, K: int):
    edges = np.linspace(s_min, s_max, K + 1)
    if s_max <= s_min:
        return np.full(values.shape, K, dtype=np.int64), edges
    # an interior edge belongs to the bin above it; the clamp sends tails to bins 1 and K
    labels = np.searchsorted(edges[1:-1], values, side="right") + 1
    return labels.astype(np.int64), edges


def assign_strata(partition: Partition, config: StratifyConfig = StratifyConfig()) -> Stratification:
    n = partition.n
    multi = n > 1
    labels = np.full(n.shape, config.K + 1, dtype=np.int64)
    intensity = np.full(n.shape, np.nan)
    if not multi.any():
        return Stratification(labels, config.K, np.full(config.K + 1, np.nan), intensity, n)
    s = cell_intensity(partition.delta[multi], partition.h[multi], config.eps_log)
    intensity[multi] = s
    s_min, s_max = np.percentile(s, [config.p_lo, config.p_hi])
    labels[multi], edges = _bin(s, float(s_min), float(s_max), config.K)
    return Stratification(labels, config.K, edges, intensity, n)


def write_stratification(strat: Stratification, json_path, labels_path) -> None:
    """JSON summary plus a little-endian u16 label array aligned with cell order."""
    labels_path = Path(labels_path)
    strat.labels.astype("<u2").tofile(labels_path)
    cells = strat.cells_per_level()
    points = strat.points_per_level()
    summary = {
        "K": strat.K,
        "edges": [None if not np.isfinite(e) else float(e) for e in strat.edges],
        "labels_path": labels_path.name,
        "per_stratum": [{"level": lv + 1, "cells": int(cells[lv]), "points": int(points[lv])}
                        for lv in range(strat.n_levels)],
    }
    Path(json_path).write_text(json.dumps(summary, indent=2))


def read_labels(labels_path) -> np.ndarray:
    return np.fromfile(labels_path, dtype="<u2").astype(np.int64)
