import math

import numpy as np
import pytest

from m3sample.bench import (BenchRow, bench_run, read_csv, run_sampler, summarize, timed_run,
                            write_csv, write_summary)
from m3sample.plotting import plot_bench, plot_level_mass
from m3sample.profiles import partition_config, resolve, stratify_config
from m3sample.synth import generate_cloud

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _rows():
    return [
        BenchRow("random", 1000, 0, 0.001, 2 << 20, "ok"),
        BenchRow("random", 1000, 1, 0.003, 4 << 20, "ok"),
        BenchRow("knn", 1000, 0, 1.5, None, "timeout"),
        BenchRow("knn", 1000, 1, None, None, "skipped"),
        BenchRow("m3", 1000, 0, 0.2, None, "ok"),
    ]


def test_summarize():
    summary = {(s["method"], s["N"]): s for s in summarize(_rows())}
    rnd = summary[("random", 1000)]
    assert rnd["status"] == "ok" and rnd["runs"] == 2
    assert rnd["mean_wall_s"] == pytest.approx(0.002)
    assert rnd["mean_peak_bytes"] == 3 << 20
    knn = summary[("knn", 1000)]
    assert knn["status"] == "timeout" and knn["runs"] == 0 and math.isnan(knn["mean_wall_s"])
    assert math.isnan(summary[("m3", 1000)]["mean_peak_bytes"])


def test_csv_round_trip(tmp_path):
    path = tmp_path / "b.csv"
    write_csv(_rows(), path)
    assert path.read_text().splitlines()[0] == "method,N,seed,wall_s,peak_bytes,status"
    assert read_csv(path) == _rows()
    text = write_summary(_rows(), tmp_path / "s.csv")
    assert len(text) == 3
    assert (tmp_path / "s.csv").read_text().startswith("method,N,runs,status")


def test_timeouts_are_rows_not_errors():
    cloud = generate_cloud("boundary-layer", 3000, 0)
    row = timed_run("knn", cloud, 100, 0, cap=0.0)
    assert row.status == "timeout" and row.N == 3000
    assert timed_run("random", cloud, 100, 0, cap=None).status == "ok"


def test_bench_skips_a_method_after_its_first_timeout(monkeypatch):
    import m3sample.bench as bench

    def slow_knn(method, cloud, m, seed, cap, options=None):
        status = "timeout" if method == "knn" else "ok"
        return BenchRow(method, cloud.n_points, seed, 0.01, None, status)

    monkeypatch.setattr(bench, "timed_run", slow_knn)
    monkeypatch.setattr(bench, "warm_up", lambda options: None)
    rows = bench_run(["random", "knn"], sizes=[500, 200], cap=1.0, seeds=[0, 1], m=50)
    got = [(r.method, r.N, r.status) for r in rows]
    assert got == [("random", 200, "ok"), ("random", 200, "ok"),
                   ("knn", 200, "timeout"), ("knn", 200, "skipped"),
                   ("random", 500, "ok"), ("random", 500, "ok"),
                   ("knn", 500, "skipped"), ("knn", 500, "skipped")]


def test_run_sampler_dispatch():
    cloud = generate_cloud("radial-bump", 2000, 1)
    for method in ("random", "m3", "grid", "proxy", "knn"):
        measure, info = run_sampler(method, cloud, 64, 2)
        assert measure.m == 64
    assert "draws" in run_sampler("proxy", cloud, 64, 2)[1]
    with pytest.raises(ValueError, match="unknown method"):
        run_sampler("voronoi", cloud, 64, 2)


def test_plots_write_png(tmp_path):
    plot_bench(summarize(_rows()), tmp_path / "b.png", cap=1.0)
    plot_level_mass({1: 0.2, 2: 0.8}, {1: 0.5, 2: 0.5}, tmp_path / "m.png", title="levels")
    for name in ("b.png", "m.png"):
        assert (tmp_path / name).read_bytes()[:8] == PNG_MAGIC


def test_profiles():
    vol = resolve("volume")
    assert (vol["eps_refine"], vol["g_max"], vol["K"]) == (0.005, 13, 64)
    surf = resolve("surface", {"eps_refine": 0.1, "K": None})
    assert surf["eps_refine"] == 0.1 and surf["K"] == 64
    assert partition_config(surf).g_max == 8
    assert stratify_config(resolve("volume", {"K": 16})).K == 16
    with pytest.raises(ValueError):
        resolve("line")
    np.testing.assert_allclose(partition_config(vol).vector_weights, 0.4)
