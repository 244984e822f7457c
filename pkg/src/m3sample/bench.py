"""Wall-clock and peak-memory benchmark of every sampler on synthetic clouds.

Runs are sequential in the calling process.  A run is timed from the
moment the sampler gets an in-memory cloud until it returns its indices, so
cloud generation and JIT compilation are excluded.  Peak memory is the
process's resident high-water mark during the run.  Linux lets us reset it
through ``/proc/self/clear_refs``; elsewhere it is reported as missing.

A run that exceeds the time cap is recorded with status ``timeout``.  The
chunked samplers check their deadline between chunks and stop early, so a
timeout costs at most about one cap.  Once a method times out at some N,
its remaining runs at that and larger N are recorded as ``skipped``.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .allocate import m3_sample
from .baselines import (Deadline, SamplerTimeout, grid_sample, knn_sample, proxy_sample,
                        random_sample)
from .cloud import LabeledPointCloud
from .measure import EmpiricalMeasure
from .partition import PartitionConfig
from .stratify import StratifyConfig
from .synth import generate_cloud

METHODS = ("random", "m3", "grid", "proxy", "knn")
CSV_FIELDS = ("method", "N", "seed", "wall_s", "peak_bytes", "status")


@dataclass
class BenchRow:
    method: str
    N: int
    seed: int
    wall_s: float | None
    peak_bytes: int | None
    status: str   # ok | timeout | skipped


@dataclass
class SamplerOptions:
    partition: PartitionConfig = PartitionConfig()
    stratify: StratifyConfig = StratifyConfig()
    rho: float = 1.0
    alpha: Mapping[int, float] | None = None
    grid_edge: float | None = None
    proxy_target: float = 256.0
    knn_k: int = 32
    knn_exact: bool = True


def run_sampler(method: str, cloud: LabeledPointCloud, m: int, seed: int,
                options: SamplerOptions = SamplerOptions(),
                deadline: Deadline | None = None) -> tuple[EmpiricalMeasure, dict]:
    """Dispatch one sampler; returns the measure and method-specific details."""
    if method == "random":
        return random_sample(cloud.n_points, m, seed), {}
    if method == "m3":
        res = m3_sample(cloud, m, seed, options.partition, options.stratify, options.rho, options.alpha)
        return res.measure, {"result": res}
    if method == "grid":
        return grid_sample(cloud, m, seed, options.grid_edge, options.partition,
                           deadline=deadline), {}
    if method == "proxy":
        measure, info = proxy_sample(cloud, m, seed, options.proxy_target, options.partition,
                                     deadline=deadline, return_info=True)
        return measure, info
    if method == "knn":
        return knn_sample(cloud, m, seed, options.knn_k, options.partition,
                          exact=options.knn_exact, deadline=deadline), {}
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")


# -- peak resident memory -------------------------------------------------------------------

def _read_hwm() -> int | None:
    try:
        with open("/proc/self/status") as fh:
            for line in fh:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    return None


def _reset_hwm() -> bool:
    try:
        with open("/proc/self/clear_refs", "w") as fh:
            fh.write("5")
        return True
    except OSError:
        return False


def timed_run(method: str, cloud: LabeledPointCloud, m: int, seed: int, cap: float | None,
              options: SamplerOptions = SamplerOptions()) -> BenchRow:
    can_track = _reset_hwm()
    start = time.perf_counter()
    status = "ok"
    try:
        run_sampler(method, cloud, m, seed, options, Deadline(cap))
    except SamplerTimeout:
        status = "timeout"
    wall = time.perf_counter() - start
    if cap is not None and wall > cap:
        status = "timeout"
    peak = _read_hwm() if can_track else None
    return BenchRow(method, cloud.n_points, seed, wall, peak, status)


def warm_up(options: SamplerOptions = SamplerOptions()) -> None:
    """Compile the numba kernels so timed runs measure compute only."""
    cloud = generate_cloud("boundary-layer", 4096, 0)
    for method in METHODS:
        run_sampler(method, cloud, 64, 0, options)


def bench_run(methods: Iterable[str] = METHODS, sizes: Iterable[int] = (10**5, 10**6),
              cap: float | None = 600.0, seeds: Iterable[int] = range(5), m: int = 8192,
              spec="boundary-layer", cloud_seed: int = 0,
              options: SamplerOptions = SamplerOptions(),
              progress: Callable[[BenchRow], None] | None = None) -> list[BenchRow]:
    """Time every (method, N, seed) combination.

    One synthetic cloud is generated per size.  The seeds vary the samplers.
    """
    methods, sizes, seeds = list(methods), sorted(int(n) for n in sizes), list(seeds)
    for name in methods:
        if name not in METHODS:
            raise ValueError(f"unknown method {name!r}; choose from {METHODS}")
    warm_up(options)
    rows: list[BenchRow] = []
    timed_out: set[str] = set()
    for n in sizes:
        cloud = generate_cloud(spec, n, cloud_seed)
        budget = min(m, n)
        for name in methods:
            for seed in seeds:
                if name in timed_out:
                    row = BenchRow(name, n, seed, None, None, "skipped")
                else:
                    row = timed_run(name, cloud, budget, seed, cap, options)
                    if row.status == "timeout":
                        timed_out.add(name)
                rows.append(row)
                if progress is not None:
                    progress(row)
        del cloud
    return rows


def summarize(rows: Iterable[BenchRow]) -> list[dict]:
    """Mean wall time and peak per (method, N) over completed runs.

    A (method, N) pair with any timed-out or skipped run reports ``timeout``.
    """
    groups: dict[tuple[str, int], list[BenchRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.N), []).append(r)
    out = []
    for (method, n), rs in groups.items():
        ok = [r for r in rs if r.status == "ok"]
        status = "ok" if len(ok) == len(rs) else "timeout"
        peaks = [r.peak_bytes for r in ok if r.peak_bytes is not None]
        walls = [r.wall_s for r in rs if r.wall_s is not None]
        out.append({
            "method": method, "N": n, "runs": len(ok), "status": status,
            "mean_wall_s": float(np.mean([r.wall_s for r in ok])) if ok else math.nan,
            "min_wall_s": min(walls) if walls else math.nan,
            "mean_peak_bytes": float(np.mean(peaks)) if peaks else math.nan,
        })
    return out


def write_csv(rows: Iterable[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        writer.writeheader()
        for r in rows:
            d = asdict(r)
            d["wall_s"] = "" if r.wall_s is None else f"{r.wall_s:.6g}"
            d["peak_bytes"] = "" if r.peak_bytes is None else r.peak_bytes
            writer.writerow(d)


def read_csv(path) -> list[BenchRow]:
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            rows.append(BenchRow(d["method"], int(d["N"]), int(d["seed"]),
                                 float(d["wall_s"]) if d["wall_s"] else None,
                                 int(d["peak_bytes"]) if d["peak_bytes"] else None,
                                 d["status"]))
    return rows


def write_summary(rows: Iterable[BenchRow], path) -> list[dict]:
    summary = summarize(rows)
    Path(path).write_text("method,N,runs,status,mean_wall_s,mean_peak_bytes\n" + "".join(
        f"{s['method']},{s['N']},{s['runs']},{s['status']},{s['mean_wall_s']:.6g},"
        f"{s['mean_peak_bytes']:.6g}\n" for s in summary))
    return summary
