"""Variation-adaptive Morton octree partition.

A cell keeps splitting while it holds more than ``kappa`` points, sits above
depth ``g_max`` and its pooled variation score exceeds ``eps_refine``.  The
score of a cell is the largest weighted within-cell spread over all
channels: the plain range for scalars and the projection diameter over a
fixed direction set for vectors.

Cells are processed one octree level at a time.  Every live cell is a
contiguous span of the Morton-sorted order, so per-cell extrema come from
segmented reductions over the sorted channel arrays.  The leaf set and the
refinement counters do not depend on the order in which cells are visited,
so this gives the same result as a FIFO queue walk.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple

import numpy as np
from numba import njit

from .cloud import BoundingCube, LabeledPointCloud
from .morton import MAX_BITS, SortedIndex


def _unit(rows) -> np.ndarray:
    d = np.asarray(rows, dtype=np.float64)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


# 3 axes, 6 face diagonals, 4 body diagonals
CUBE_DIRECTIONS_13 = _unit([
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1),
    (1, 1, 1), (1, 1, -1), (1, -1, 1), (-1, 1, 1),
])

STOP_CAP, STOP_DEPTH, STOP_SMOOTH = 0, 1, 2
STOP_NAMES = ("cap", "depth", "smooth")


@dataclass(frozen=True)
class PartitionConfig:
    eps_refine: float = 0.005
    g_max: int = 13
    kappa: int = 32
    directions: np.ndarray = field(default_factory=lambda: CUBE_DIRECTIONS_13.copy())
    scalar_weights: float | Mapping[str, float] = 1.0
    vector_weights: float | Mapping[str, float] = 0.4

    def __post_init__(self):
        if not self.eps_refine > 0:
            raise ValueError("eps_refine must be > 0")
        if not 0 <= self.g_max <= MAX_BITS:
            raise ValueError(f"g_max must be in [0, {MAX_BITS}]")
        if self.kappa < 1:
            raise ValueError("kappa must be >= 1")
        d = np.atleast_2d(np.asarray(self.directions, dtype=np.float64))
        if d.shape[1] != 3 or d.shape[0] == 0:
            raise ValueError("directions must be a non-empty (D, 3) array")
        if np.max(np.abs(np.linalg.norm(d, axis=1) - 1.0)) > 1e-12:
            raise ValueError("directions must be unit vectors")
        object.__setattr__(self, "directions", d)

    def channel_weights(self, cloud: LabeledPointCloud) -> np.ndarray:
        """Per-channel weights aligned with ``cloud.channel_names``."""
        out = []
        for names, spec, kind in ((cloud.scalars, self.scalar_weights, "scalar"),
                                  (cloud.vectors, self.vector_weights, "vector")):
            for name in names:
                if isinstance(spec, Mapping):
                    if name not in spec:
                        raise ValueError(f"no weight given for {kind} channel {name!r}")
                    out.append(float(spec[name]))
                else:
                    out.append(float(spec))
        w = np.asarray(out, dtype=np.float64)
        if w.size == 0:
            raise ValueError("cloud has no channels to score")
        if np.any(w < 0) or not np.any(w > 0):
            raise ValueError("channel weights must be >= 0 with at least one positive")
        return w


class Cell(NamedTuple):
    key: int
    depth: int
    lo: int
    hi: int
    n: int
    h: float
    delta: float
    trigger: str
    stop: str


@dataclass(frozen=True, eq=False)
class Partition:
    """Leaf cells in Morton order, stored column-wise."""

    key: np.ndarray
    depth: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    h: np.ndarray
    delta: np.ndarray
    trigger: np.ndarray
    stop: np.ndarray
    channels: tuple[str, ...]
    n_scalar: int
    thr_counts: np.ndarray
    refine_counts: np.ndarray
    config: PartitionConfig | None = None

    @property
    def n(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def n_cells(self) -> int:
        return self.lo.shape[0]

    def __len__(self) -> int:
        return self.n_cells

    @property
    def n_points(self) -> int:
        return int(self.hi[-1]) if self.n_cells else 0

    # counters aggregated by channel kind, as reported in the w_psi sweep
    @property
    def n_thr_s(self) -> int:
        return int(self.thr_counts[: self.n_scalar].sum())

    @property
    def n_thr_v(self) -> int:
        return int(self.thr_counts[self.n_scalar:].sum())

    @property
    def n_refine_s(self) -> int:
        return int(self.refine_counts[: self.n_scalar].sum())

    @property
    def n_refine_v(self) -> int:
        return int(self.refine_counts[self.n_scalar:].sum())

    def counters(self) -> dict:
        return {
            "cells": self.n_cells,
            "thr_s": self.n_thr_s, "thr_v": self.n_thr_v,
            "refine_s": self.n_refine_s, "refine_v": self.n_refine_v,
            "thr": dict(zip(self.channels, self.thr_counts.tolist())),
            "refine": dict(zip(self.channels, self.refine_counts.tolist())),
        }

    def cell(self, i: int) -> Cell:
        return Cell(int(self.key[i]), int(self.depth[i]), int(self.lo[i]), int(self.hi[i]),
                    int(self.hi[i] - self.lo[i]), float(self.h[i]), float(self.delta[i]),
                    self.channels[self.trigger[i]] if self.channels else "",
                    STOP_NAMES[self.stop[i]])

    def __iter__(self) -> Iterator[Cell]:
        return (self.cell(i) for i in range(self.n_cells))

    def anchored_keys(self) -> np.ndarray:
        """Full-length key of each cell's first lattice corner; unique among leaves."""
        shift = (3 * (MAX_BITS - self.depth)).astype(np.uint64)
        return self.key.astype(np.uint64) << shift

    def cell_of_sorted(self) -> np.ndarray:
        """Cell index for each position of the sorted order."""
        return np.repeat(np.arange(self.n_cells, dtype=np.int64), self.n)

    def cell_of_point(self, sorted_index: SortedIndex) -> np.ndarray:
        """Cell index for each original point index."""
        out = np.empty(sorted_index.perm.shape[0], dtype=np.int64)
        out[sorted_index.perm] = self.cell_of_sorted()
        return out


# -- per-cell scoring ------------------------------------------------------------

def projection_diameter(vectors, directions=CUBE_DIRECTIONS_13) -> float:
    """Largest spread of ``d . v`` over the points, maximised over directions."""
    v = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    proj = _project(v, np.asarray(directions, dtype=np.float64))
    return float(np.max(proj.max(axis=0) - proj.min(axis=0)))


def _project(v: np.ndarray, directions: np.ndarray) -> np.ndarray:
    # spelled out (no BLAS) so it rounds exactly like _project_rows
    return (v[:, 0, None] * directions[:, 0] + v[:, 1, None] * directions[:, 1]) \
        + v[:, 2, None] * directions[:, 2]


def _channel_spreads(cell: LabeledPointCloud, directions: np.ndarray) -> np.ndarray:
    spreads = [float(np.ptp(v)) for v in cell.scalars.values()]
    spreads += [projection_diameter(v, directions) for v in cell.vectors.values()]
    return np.asarray(spreads, dtype=np.float64)


def cell_variation_score(cell: LabeledPointCloud, config: PartitionConfig) -> tuple[float, str]:
    """Pooled variation score of one cell and the channel attaining it.

    Ties go to scalars before vectors, then to declaration order.
    """
    weighted = config.channel_weights(cell) * _channel_spreads(cell, config.directions)
    best = int(np.argmax(weighted))
    return float(weighted[best]), cell.channel_names[best]


# -- partition construction ----------------------------------------------------------

def _sorted_feature_rows(cloud: LabeledPointCloud, perm: np.ndarray, directions: np.ndarray):
    """Channel data in sorted order as contiguous rows, plus the row->channel map."""
    n_dir = directions.shape[0]
    n_rows = len(cloud.scalars) + n_dir * len(cloud.vectors)
    rows = np.empty((n_rows, perm.shape[0]), dtype=np.float64)
    owner = np.empty(n_rows, dtype=np.int64)
    r = 0
    for c, v in enumerate(cloud.scalars.values()):
        rows[r] = v[perm]
        owner[r] = c
        r += 1
    for c, v in enumerate(cloud.vectors.values(), start=len(cloud.scalars)):
        _project_rows(np.ascontiguousarray(v, dtype=np.float64), perm, directions, rows[r: r + n_dir])
        owner[r: r + n_dir] = c
        r += n_dir
    return rows, owner


@njit(cache=True)
def _project_rows(v, perm, directions, out):
    """out[d, i] = directions[d] . v[perm[i]]"""
    n = perm.shape[0]
    xs, ys, zs = np.empty(n), np.empty(n), np.empty(n)
    for i in range(n):
        p = perm[i]
        xs[i], ys[i], zs[i] = v[p, 0], v[p, 1], v[p, 2]
    for d in range(directions.shape[0]):
        dx, dy, dz = directions[d, 0], directions[d, 1], directions[d, 2]
        row = out[d]
        for i in range(n):
            row[i] = (xs[i] * dx + ys[i] * dy) + zs[i] * dz


def _gather_spans(lo: np.ndarray, hi: np.ndarray):
    """Positions covered by the spans, concatenated, and each span's offset."""
    n = hi - lo
    offsets = np.cumsum(n) - n
    take = np.repeat(lo - offsets, n) + np.arange(int(n.sum()), dtype=np.int64)
    return take, offsets


# channel data are validated finite, so fastmath min/max is exact
@njit(cache=True, fastmath=True)
def _span_spreads(rows, lo, hi):
    """max - min of every row over every span [lo, hi)."""
    n_rows, n_spans = rows.shape[0], lo.shape[0]
    out = np.empty((n_rows, n_spans))
    for r in range(n_rows):
        row = rows[r]
        for c in range(n_spans):
            a = row[lo[c]]
            b = a
            for i in range(lo[c] + 1, hi[c]):
                v = row[i]
                a = min(a, v)
                b = max(b, v)
            out[r, c] = b - a
    return out


@njit(cache=True, fastmath=True)
def _span_minmax(rows, lo, hi):
    n_rows, n_spans = rows.shape[0], lo.shape[0]
    mn = np.empty((n_rows, n_spans))
    mx = np.empty((n_rows, n_spans))
    for r in range(n_rows):
        row = rows[r]
        for c in range(n_spans):
            a = row[lo[c]]
            b = a
            for i in range(lo[c] + 1, hi[c]):
                v = row[i]
                a = min(a, v)
                b = max(b, v)
            mn[r, c] = a
            mx[r, c] = b
    return mn, mx


class _ShallowSpreads:
    """Row spreads of every nonempty cell down to a shallow depth.

    One scan at depth ``top`` gives per-cell extrema.  Shallower levels merge
    them, so the first levels of the refinement need no pass over the points.
    """

    def __init__(self, rows: np.ndarray, keys: np.ndarray, top: int):
        self.top = top
        prefix = keys >> np.uint64(3 * (MAX_BITS - top))
        starts = np.flatnonzero(np.r_[True, prefix[1:] != prefix[:-1]])
        lo = starts.astype(np.int64)
        hi = np.append(starts[1:], keys.shape[0]).astype(np.int64)
        mn, mx = _span_minmax(rows, lo, hi)
        cells = prefix[starts]
        self.levels = {top: (cells, mn, mx)}
        for depth in range(top - 1, -1, -1):
            parent = cells >> np.uint64(3)
            first = np.flatnonzero(np.r_[True, parent[1:] != parent[:-1]])
            mn = np.minimum.reduceat(mn, first, axis=1)
            mx = np.maximum.reduceat(mx, first, axis=1)
            cells = parent[first]
            self.levels[depth] = (cells, mn, mx)

    def spreads(self, depth: int, prefix: np.ndarray) -> np.ndarray:
        cells, mn, mx = self.levels[depth]
        at = np.searchsorted(cells, prefix)
        return mx[:, at] - mn[:, at]


def _shallow_depth(n_points: int, config: "PartitionConfig") -> int:
    # deepest level at which cells still hold many points on average
    return int(max(0, min(config.g_max, MAX_BITS, np.floor(np.log(max(n_points, 1) / (4 * config.kappa)) / np.log(8)))))


def _channel_max(row_spreads: np.ndarray, owner: np.ndarray, n_channels: int) -> np.ndarray:
    out = np.empty((n_channels, row_spreads.shape[1]), dtype=np.float64)
    for c in range(n_channels):
        out[c] = row_spreads[owner == c].max(axis=0)
    return out


def build_partition(cloud: LabeledPointCloud, sorted_index: SortedIndex, config: PartitionConfig,
                    cube: BoundingCube | None = None) -> Partition:
    """Refine the Morton octree until every leaf meets a stop rule.

    A cell stops when it holds at most ``kappa`` points, reaches ``g_max``,
    or has score at most ``eps_refine``.  The first two rules are checked
    before the score.  Every leaf still records its score for later
    stratification.  Threshold counters count weighted channel spreads above
    ``eps_refine`` in cells that reach the score test.  Refine counters count
    executed splits by the channel that triggered them.
    """
    weights = config.channel_weights(cloud)
    n_channels = weights.shape[0]
    n_points = cloud.n_points
    edge = 1.0 if cube is None else float(cube.edge)
    rows, owner = _sorted_feature_rows(cloud, sorted_index.perm, config.directions)
    keys = sorted_index.keys

    thr = np.zeros(n_channels, dtype=np.int64)
    refine = np.zeros(n_channels, dtype=np.int64)
    leaves = {name: [] for name in ("key", "depth", "lo", "hi", "delta", "trigger", "stop")}

    lo = np.zeros(1, dtype=np.int64)
    hi = np.full(1, n_points, dtype=np.int64)
    prefix = np.zeros(1, dtype=np.uint64)
    depth = 0
    shallow = _ShallowSpreads(rows, keys, _shallow_depth(n_points, config)) if n_points else None
    while lo.size:
        if shallow is not None and depth <= shallow.top:
            row_spreads = shallow.spreads(depth, prefix)
        else:
            row_spreads = _span_spreads(rows, lo, hi)
        weighted = weights[:, None] * _channel_max(row_spreads, owner, n_channels)
        delta = weighted.max(axis=0)
        trigger = weighted.argmax(axis=0)
        counts = hi - lo
        capped = counts <= config.kappa
        deep = np.full(lo.shape, depth >= config.g_max)
        scored = ~capped & ~deep
        thr += np.count_nonzero((weighted > config.eps_refine) & scored, axis=1)
        split = scored & (delta > config.eps_refine)
        refine += np.bincount(trigger[split], minlength=n_channels)

        done = ~split
        stop = np.where(capped, STOP_CAP, np.where(deep, STOP_DEPTH, STOP_SMOOTH))
        leaves["key"].append(prefix[done])
        leaves["depth"].append(np.full(int(done.sum()), depth, dtype=np.int64))
        leaves["lo"].append(lo[done])
        leaves["hi"].append(hi[done])
        leaves["delta"].append(delta[done])
        leaves["trigger"].append(trigger[done])
        leaves["stop"].append(stop[done])

        if not split.any():
            break
        take, offsets = _gather_spans(lo[split], hi[split])
        child = keys[take] >> np.uint64(3 * (MAX_BITS - depth - 1))
        starts = np.zeros(take.shape[0], dtype=bool)
        starts[offsets] = True
        starts[1:] |= child[1:] != child[:-1]
        first = np.flatnonzero(starts)
        last = np.append(first[1:], take.shape[0]) - 1
        lo = take[first]
        hi = take[last] + 1
        prefix = child[first]
        depth += 1

    cols = {k: np.concatenate(v) for k, v in leaves.items()}
    order = np.argsort(cols["lo"], kind="stable")
    cols = {k: v[order] for k, v in cols.items()}
    return Partition(
        key=cols["key"].astype(np.uint64),
        depth=cols["depth"],
        lo=cols["lo"],
        hi=cols["hi"],
        h=edge / np.exp2(cols["depth"]),
        delta=cols["delta"],
        trigger=cols["trigger"].astype(np.int64),
        stop=cols["stop"].astype(np.uint8),
        channels=tuple(cloud.channel_names),
        n_scalar=len(cloud.scalars),
        thr_counts=thr,
        refine_counts=refine,
        config=config,
    )


def stop_rule_holds(cell: Cell, cell_points: LabeledPointCloud, config: PartitionConfig) -> bool:
    """Re-evaluate the rule a leaf recorded as its reason for stopping."""
    if cell.stop == "cap":
        return cell.n <= config.kappa
    if cell.stop == "depth":
        return cell.depth >= config.g_max
    delta, _ = cell_variation_score(cell_points, config)
    return delta <= config.eps_refine


# -- export --------------------------------------------------------------------------------

def write_partition_jsonl(partition: Partition, path) -> None:
    with open(path, "w") as fh:
        for c in partition:
            fh.write(json.dumps({"key": c.key, "depth": c.depth, "lo": c.lo, "hi": c.hi, "n": c.n,
                                 "h": c.h, "delta": c.delta, "trigger": c.trigger,
                                 "stop": c.stop}) + "\n")


def read_partition_jsonl(path) -> Partition:
    """Read cells back; refinement counters are not part of the export and come back zero."""
    recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
    if not recs:
        raise ValueError(f"{path}: no cells")
    channels = tuple(dict.fromkeys(r["trigger"] for r in recs))
    index = {c: i for i, c in enumerate(channels)}
    col = lambda k, dt: np.asarray([r[k] for r in recs], dtype=dt)  # noqa: E731
    return Partition(
        key=col("key", np.uint64), depth=col("depth", np.int64),
        lo=col("lo", np.int64), hi=col("hi", np.int64), h=col("h", np.float64),
        delta=col("delta", np.float64),
        trigger=np.asarray([index[r["trigger"]] for r in recs], dtype=np.int64),
        stop=np.asarray([STOP_NAMES.index(r.get("stop", "smooth")) for r in recs], dtype=np.uint8),
        channels=channels, n_scalar=0,
        thr_counts=np.zeros(len(channels), dtype=np.int64),
        refine_counts=np.zeros(len(channels), dtype=np.int64),
    )
