"""Comparison samplers: uniform random, voxel grid, coarse-voxel proxy, k-NN.

The scoring samplers read the cloud in fixed-size chunks, so they work on
memory-mapped clouds without loading every channel at once.  Their only
O(N) side structures are voxel ids, a permutation, or a score per point.

Channel spreads are measured on z-scored channels, as in the partition: the
spread of ``(v - mean) / std`` is ``spread(v) / std``, so a statistics pass
followed by one scoring pass on raw values is enough.
"""
from __future__ import annotations

import time

import numpy as np

from .allocate import cell_stream, draw_spans, water_fill
from .cloud import LabeledPointCloud, _ZERO_STD_RTOL
from .measure import EmpiricalMeasure
from .partition import PartitionConfig

CHUNK = 1 << 16
PROXY_EPS = 1e-6


class SamplerTimeout(TimeoutError):
    """Raised by a sampler whose deadline passed between chunks."""


class Deadline:
    """Wall-clock budget checked by the chunked loops."""

    def __init__(self, seconds: float | None):
        self.seconds = seconds
        self._end = None if seconds is None else time.perf_counter() + seconds

    def check(self) -> None:
        if self._end is not None and time.perf_counter() > self._end:
            raise SamplerTimeout(f"exceeded {self.seconds} s")


def _check(deadline: Deadline | None) -> None:
    if deadline is not None:
        deadline.check()


def _chunks(n: int, size: int = CHUNK):
    for start in range(0, n, size):
        yield start, min(n, start + size)


def _all_points(n: int) -> EmpiricalMeasure:
    return EmpiricalMeasure(np.arange(n, dtype=np.int64))


def _check_budget(n: int, m: int) -> None:
    if m < 0:
        raise ValueError("m must be >= 0")
    if n < 1:
        raise ValueError("cloud is empty")


# -- random ------------------------------------------------------------------------------

def random_sample(n: int, m: int, seed: int) -> EmpiricalMeasure:
    """``m`` distinct indices from ``range(n)``, uniform without replacement."""
    if not 0 <= m <= n:
        raise ValueError(f"need 0 <= m <= N, got m={m}, N={n}")
    idx = cell_stream(seed, 0).choice(n, size=m, replace=False)
    return EmpiricalMeasure(np.asarray(idx, dtype=np.int64))


# -- channel statistics and scoring ---------------------------------------------------------

class _RunningMoments:
    """Column-wise population mean and variance, merged chunk by chunk."""

    def __init__(self, width: int):
        self.n = 0
        self.mean = np.zeros(width)
        self.m2 = np.zeros(width)

    def update(self, block: np.ndarray) -> None:
        nb = block.shape[0]
        if nb == 0:
            return
        mb = block.mean(axis=0)
        m2b = ((block - mb) ** 2).sum(axis=0)
        total = self.n + nb
        d = mb - self.mean
        self.mean = self.mean + d * (nb / total)
        self.m2 = self.m2 + m2b + d * d * (self.n * nb / total)
        self.n = total

    def inverse_std(self) -> np.ndarray:
        std = np.sqrt(self.m2 / max(self.n, 1))
        zero = std <= _ZERO_STD_RTOL * np.maximum(1.0, np.abs(self.mean))
        return np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, std))


def _columns(cloud: LabeledPointCloud, start: int, stop: int) -> np.ndarray:
    parts = [v[start:stop, None] for v in cloud.scalars.values()]
    parts += [v[start:stop] for v in cloud.vectors.values()]
    return np.concatenate(parts, axis=1).astype(np.float64, copy=False)


class _Scorer:
    """Maps raw channel values to weighted projection rows.

    Row ``r`` belongs to channel ``owner[r]``; a group's score is the largest
    weighted spread over its rows.
    """

    def __init__(self, cloud: LabeledPointCloud, config: PartitionConfig, normalize: bool,
                 deadline: Deadline | None = None):
        self.weights = config.channel_weights(cloud)
        self.n_scalar = len(cloud.scalars)
        self.n_vector = len(cloud.vectors)
        self.directions = config.directions
        width = self.n_scalar + 3 * self.n_vector
        if normalize:
            moments = _RunningMoments(width)
            for start, stop in _chunks(cloud.n_points):
                moments.update(_columns(cloud, start, stop))
                _check(deadline)
            self.scale = moments.inverse_std()
        else:
            self.scale = np.ones(width)
        n_dir = self.directions.shape[0]
        self.owner = np.concatenate([np.arange(self.n_scalar),
                                     np.repeat(np.arange(self.n_scalar, self.n_scalar + self.n_vector),
                                               n_dir)]).astype(np.int64)
        self.row_weight = self.weights[self.owner]

    def rows(self, values: np.ndarray) -> np.ndarray:
        """(..., channels) raw values -> (..., rows) weighted projections."""
        z = values * self.scale
        out = [z[..., : self.n_scalar]]
        for j in range(self.n_vector):
            a = self.n_scalar + 3 * j
            out.append(z[..., a: a + 3] @ self.directions.T)
        return np.concatenate(out, axis=-1) * self.row_weight

    def score(self, row_spread: np.ndarray) -> np.ndarray:
        """(..., rows) weighted spreads -> (...) score: max over rows."""
        return row_spread.max(axis=-1)


def _voxel_ids(positions: np.ndarray, voxel_edge: float, deadline=None):
    """Dense voxel id per point on the grid anchored at the bounding-box minimum."""
    n = positions.shape[0]
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for start, stop in _chunks(n):
        p = positions[start:stop]
        lo = np.minimum(lo, p.min(axis=0))
        hi = np.maximum(hi, p.max(axis=0))
    dims = np.maximum(1, np.ceil((hi - lo) / voxel_edge).astype(np.int64))
    if int(np.prod(dims)) > 1 << 62:
        raise ValueError("voxel edge too small for the cloud extent")
    ids = np.empty(n, dtype=np.int64)
    for start, stop in _chunks(n):
        cell = np.floor((positions[start:stop] - lo) / voxel_edge).astype(np.int64)
        cell = np.minimum(cell, dims - 1)
        ids[start:stop] = cell[:, 0] + dims[0] * (cell[:, 1] + dims[1] * cell[:, 2])
        _check(deadline)
    # compact to 0..V-1 in ascending grid order
    if int(np.prod(dims)) <= 8 * n + 1024:
        present = np.zeros(int(np.prod(dims)), dtype=bool)
        present[ids] = True
        rank = np.cumsum(present) - 1
        return rank[ids], int(present.sum())
    uniq, inv = np.unique(ids, return_inverse=True)
    return inv.astype(np.int64), int(uniq.size)


def voxel_scores(cloud: LabeledPointCloud, ids: np.ndarray, n_vox: int, config: PartitionConfig,
                 normalize: bool = True, deadline=None) -> np.ndarray:
    """Pooled variation score of every voxel from chunked min/max scatters."""
    scorer = _Scorer(cloud, config, normalize, deadline)
    n_rows = scorer.owner.shape[0]
    vmin = np.full((n_rows, n_vox), np.inf)
    vmax = np.full((n_rows, n_vox), -np.inf)
    for start, stop in _chunks(cloud.n_points):
        rows = scorer.rows(_columns(cloud, start, stop))
        vid = ids[start:stop]
        for r in range(n_rows):
            np.minimum.at(vmin[r], vid, rows[:, r])
            np.maximum.at(vmax[r], vid, rows[:, r])
        _check(deadline)
    return scorer.score((vmax - vmin).T)


def _members(ids: np.ndarray, n_vox: int):
    """Points grouped by voxel: permutation, group starts and counts."""
    perm = np.argsort(ids, kind="stable")
    counts = np.bincount(ids, minlength=n_vox)
    starts = np.cumsum(counts) - counts
    return perm, starts, counts


def _edge_for_occupancy(positions: np.ndarray, n: int, occupancy: float) -> float:
    extent = positions.max(axis=0) - positions.min(axis=0)
    extent = np.where(extent > 0, extent, max(float(extent.max()), 1.0))
    return float(np.cbrt(np.prod(extent) * occupancy / n))


# -- grid -------------------------------------------------------------------------------------

def grid_sample(cloud: LabeledPointCloud, m: int, seed: int, voxel_edge: float | None = None,
                config: PartitionConfig = PartitionConfig(), normalize: bool = True,
                occupancy: float = 32.0, deadline: Deadline | None = None) -> EmpiricalMeasure:
    """Round-robin draws across nonempty voxels of a uniform grid.

    Every full round takes one more point from each voxel that still has
    points left.  The final partial round favours voxels with higher score,
    ties broken by voxel id.  Within a voxel, points are drawn uniformly
    without replacement by a partial Fisher-Yates shuffle; all voxels share
    one stream seeded by ``seed``.  ``voxel_edge`` defaults to the edge that gives a
    mean of ``occupancy`` points per box voxel.
    """
    n = cloud.n_points
    _check_budget(n, m)
    if m >= n:
        return _all_points(n)
    if voxel_edge is None:
        voxel_edge = _edge_for_occupancy(cloud.positions, n, occupancy)
    if not voxel_edge > 0:
        raise ValueError("voxel edge must be > 0")
    ids, n_vox = _voxel_ids(cloud.positions, voxel_edge, deadline)
    scores = voxel_scores(cloud, ids, n_vox, config, normalize, deadline)
    perm, starts, counts = _members(ids, n_vox)
    order = np.lexsort((np.arange(n_vox), -scores))
    quotas = np.empty(n_vox, dtype=np.int64)
    quotas[order] = water_fill(counts[order], m)
    drawn = np.flatnonzero(quotas)
    out = draw_spans(perm, starts[drawn], counts[drawn], quotas[drawn], None, seed)
    return EmpiricalMeasure(out)


# -- proxy ------------------------------------------------------------------------------------

def proxy_sample(cloud: LabeledPointCloud, m: int, seed: int, target: float = 256.0,
                 config: PartitionConfig = PartitionConfig(), normalize: bool = True,
                 eps: float = PROXY_EPS, deadline: Deadline | None = None,
                 return_info: bool = False):
    """Global importance sampling over coarse voxels.

    Voxels are sized for a mean of ``target`` points each.  A draw picks a
    voxel with probability proportional to ``score + eps`` and then a point
    uniformly inside it.  Duplicate points are rejected until ``m`` distinct
    indices are collected.  With ``return_info`` the total number of draws
    is reported alongside the measure.
    """
    n = cloud.n_points
    _check_budget(n, m)
    if m >= n:
        measure = _all_points(n)
        return (measure, {"draws": 0, "voxels": 0, "voxel_edge": None}) if return_info else measure
    edge = _edge_for_occupancy(cloud.positions, n, target)
    ids, n_vox = _voxel_ids(cloud.positions, edge, deadline)
    scores = voxel_scores(cloud, ids, n_vox, config, normalize, deadline)
    perm, starts, counts = _members(ids, n_vox)
    importance = scores + eps
    cdf = np.cumsum(importance)
    cdf /= cdf[-1]
    rng = cell_stream(seed, 0)
    taken = np.zeros(n, dtype=bool)
    out = np.empty(m, dtype=np.int64)
    have = draws = 0
    while have < m:
        need = m - have
        batch = max(64, need + need // 4)
        v = np.minimum(np.searchsorted(cdf, rng.random(batch), side="right"), n_vox - 1)
        pts = perm[starts[v] + (rng.random(batch) * counts[v]).astype(np.int64)]
        _, first = np.unique(pts, return_index=True)
        fresh = np.zeros(batch, dtype=bool)
        fresh[first] = True
        fresh &= ~taken[pts]
        accept = np.flatnonzero(fresh)[:need]
        if accept.size == need:
            draws += int(accept[-1]) + 1
        else:
            draws += batch
        out[have: have + accept.size] = pts[accept]
        taken[pts[accept]] = True
        have += accept.size
        _check(deadline)
    measure = EmpiricalMeasure(out)
    if return_info:
        return measure, {"draws": draws, "voxels": n_vox, "voxel_edge": edge}
    return measure


# -- k-NN -------------------------------------------------------------------------------------

def _nearest_rows(d2: np.ndarray, cand: np.ndarray, k: int) -> np.ndarray:
    """k smallest entries per row, ordered by (distance, candidate index)."""
    part = np.argpartition(d2, k - 1, axis=1)[:, :k]
    dk = np.take_along_axis(d2, part, axis=1)
    kth = dk.max(axis=1)
    # rows where a tie at the k-th distance leaves the choice open
    ties = np.count_nonzero(d2 == kth[:, None], axis=1) > np.count_nonzero(dk == kth[:, None], axis=1)
    nb = cand[part]
    for r in np.flatnonzero(ties).tolist():
        pool = np.flatnonzero(d2[r] <= kth[r])
        pick = np.lexsort((cand[pool], d2[r, pool]))[:k]
        nb[r] = cand[pool[pick]]
    return nb


def knn_exact(positions: np.ndarray, k: int, queries: slice | None = None, deadline=None):
    """Yield ``(start, neighbors)`` blocks of the exact k-NN graph by brute force.

    Neighbors are the ``k`` points nearest in Euclidean distance, a point
    counting as its own neighbor; ties go to the lower index.
    """
    n = positions.shape[0]
    xs, ys, zs = (np.ascontiguousarray(positions[:, a], dtype=np.float64) for a in range(3))
    cand = np.arange(n, dtype=np.int64)
    block = max(1, (1 << 22) // n)
    for start in range(0, n, block):
        stop = min(n, start + block)
        q = np.asarray(positions[start:stop], dtype=np.float64)
        d2 = (xs - q[:, :1]) ** 2
        d2 += (ys - q[:, 1:2]) ** 2
        d2 += (zs - q[:, 2:3]) ** 2
        yield start, _nearest_rows(d2, cand, k)
        _check(deadline)


def knn_morton_window(positions: np.ndarray, k: int, window: int | None = None, deadline=None):
    """Approximate k-NN: exact search restricted to a window of the Morton order.

    Each point only considers the ``window`` points on either side of it in
    Morton order.  Much cheaper than :func:`knn_exact`, but neighbors across
    Z-curve jumps can be missed.
    """
    from .cloud import compute_bounds
    from .morton import morton_sort

    n = positions.shape[0]
    window = max(k, 2 * k if window is None else window)
    order = morton_sort(np.asarray(positions, dtype=np.float64), compute_bounds(positions)).perm
    p = np.asarray(positions, dtype=np.float64)[order]
    block = 1024
    for start in range(0, n, block):
        stop = min(n, start + block)
        a, b = max(0, start - window), min(n, stop + window)
        q = p[start:stop]
        d2 = ((p[None, a:b, :] - q[:, None, :]) ** 2).sum(axis=2)
        rel = np.arange(a, b)[None, :] - np.arange(start, stop)[:, None]
        d2[np.abs(rel) > window] = np.inf
        nb = _nearest_rows(d2, order[a:b], min(k, b - a))
        yield order[start:stop], nb
        _check(deadline)


def knn_scores(cloud: LabeledPointCloud, k: int = 32, config: PartitionConfig = PartitionConfig(),
               normalize: bool = True, exact: bool = True, deadline: Deadline | None = None) -> np.ndarray:
    """Pooled variation score of every point's k-neighborhood."""
    n = cloud.n_points
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    scorer = _Scorer(cloud, config, normalize, deadline)
    values = _columns(cloud, 0, n)
    scores = np.empty(n)
    if exact:
        blocks = ((np.arange(s, s + nb.shape[0]), nb)
                  for s, nb in knn_exact(cloud.positions, k, deadline=deadline))
    else:
        blocks = knn_morton_window(cloud.positions, k, deadline=deadline)
    for who, nb in blocks:
        rows = scorer.rows(values[nb])
        scores[who] = scorer.score(rows.max(axis=1) - rows.min(axis=1))
    return scores


def knn_sample(cloud: LabeledPointCloud, m: int, seed: int = 0, k: int = 32,
               config: PartitionConfig = PartitionConfig(), normalize: bool = True,
               exact: bool = True, deadline: Deadline | None = None) -> EmpiricalMeasure:
    """Top-``m`` points by neighborhood score, ties to the lower index.

    The selection is deterministic; ``seed`` is accepted for a uniform
    sampler signature.
    """
    n = cloud.n_points
    _check_budget(n, m)
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if m >= n:
        return _all_points(n)
    scores = knn_scores(cloud, k, config, normalize, exact, deadline)
    order = np.lexsort((np.arange(n), -scores))
    return EmpiricalMeasure(order[:m].astype(np.int64))


METHODS = ("random", "m3", "grid", "proxy", "knn")


def default_voxel_edge(cloud: LabeledPointCloud, occupancy: float = 32.0) -> float:
    return _edge_for_occupancy(cloud.positions, cloud.n_points, occupancy)


__all__ = [
    "CHUNK", "Deadline", "SamplerTimeout", "METHODS", "random_sample", "grid_sample",
    "proxy_sample", "knn_sample", "knn_scores", "knn_exact", "knn_morton_window",
    "voxel_scores", "default_voxel_edge",
]
