"""Command-line entry point: ``m3 <subcommand> ...``.

Hyperparameters resolve in three layers: the named profile (``surface`` or
``volume``), then an optional JSON config file, then explicit flags.  Every
successful run writes a manifest with the resolved configuration and the
SHA-256 of its inputs and outputs; ``m3 replay`` re-executes a manifest and
checks that the outputs come out identical.

Outputs are written to temporary names and renamed only once the whole
command has succeeded, so a failed run leaves nothing half-written.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .profiles import PROFILES, partition_config, resolve, stratify_config

STOCHASTIC_METHODS = ("random", "m3", "grid", "proxy")


class CliError(Exception):
    pass


# -- output bookkeeping ----------------------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Outputs:
    """Stages outputs under temporary names; commits or discards them together."""

    def __init__(self):
        self._staged: list[tuple[Path, Path]] = []

    def add(self, path) -> Path:
        final = Path(path)
        if final.parent and not final.parent.exists():
            final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.with_name(f".{final.stem}.partial{final.suffix}")
        self._staged.append((final, tmp))
        return tmp

    def commit(self) -> list[Path]:
        missing = [str(f) for f, t in self._staged if not t.exists()]
        if missing:
            raise CliError(f"declared outputs were not produced: {missing}")
        for final, tmp in self._staged:
            os.replace(tmp, final)
        return [f for f, _ in self._staged]

    def discard(self) -> None:
        for _, tmp in self._staged:
            if tmp.exists():
                tmp.unlink()


# -- configuration ------------------------------------------------------------------------------

def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise CliError("config file must hold a JSON object")
    return data


def _resolved(args, keys: dict[str, str]) -> dict:
    """Profile < config file < flags, for the given config-key -> attribute map."""
    config = _read_config(args.config)
    values = dict(config)
    for key, attr in keys.items():
        flag = getattr(args, attr, None)
        if flag is not None:
            values[key] = flag
    return resolve(args.profile, values)


_MODEL_KEYS = {"eps_refine": "eps_refine", "g_max": "g_max", "kappa": "kappa",
               "scalar_weights": "w_scalar", "vector_weights": "w_vector", "K": "K",
               "rho": "rho", "eps_log": "eps_log", "p_lo": "p_lo", "p_hi": "p_hi"}


def _require_seed(cfg: dict, what: str) -> int:
    if cfg.get("seed") is None:
        raise CliError(f"{what} is stochastic: --seed (or 'seed' in the config file) is required")
    return int(cfg["seed"])


def _parse_alpha(text):
    if text is None:
        return None
    if isinstance(text, dict):
        data = text
    else:
        p = Path(text)
        try:
            data = json.loads(p.read_text() if p.exists() else text)
        except json.JSONDecodeError as exc:
            raise CliError(f"alpha must be JSON mapping level -> mass: {exc}") from None
    return {int(k): float(v) for k, v in data.items()}


def _apply_threads() -> int | None:
    raw = os.environ.get("M3_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"M3_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise CliError("M3_THREADS must be >= 0")
    import numba
    if n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


# -- subcommands ----------------------------------------------------------------------------------

def _load(path):
    from .cloud import load_cloud
    if not Path(path).exists():
        raise CliError(f"input not found: {path}")
    return load_cloud(path)


def cmd_gen(args, out: Outputs) -> dict:
    from .cloud import write_cloud
    from .synth import generate_cloud

    cfg = _resolved(args, {"seed": "seed", "n": "n", "spec": "spec"})
    seed = _require_seed(cfg, "gen")
    spec = cfg.get("spec")
    if spec is None or cfg.get("n") is None:
        raise CliError("gen needs --spec and --n")
    if isinstance(spec, str) and Path(spec).exists():
        spec = json.loads(Path(spec).read_text())
    cloud = generate_cloud(spec, int(float(cfg["n"])), seed)
    fmt = "csv" if str(args.out).endswith(".csv") else "binary"
    write_cloud(cloud, out.add(args.out), fmt)
    return {"config": cfg, "inputs": [], "outputs": [args.out]}


def _partition(cloud, cfg, normalize=True):
    from .cloud import compute_bounds, zscore_normalize
    from .morton import morton_sort
    from .partition import build_partition

    if normalize:
        cloud = zscore_normalize(cloud)
    cube = compute_bounds(cloud)
    sorted_index = morton_sort(cloud, cube)
    return build_partition(cloud, sorted_index, partition_config(cfg), cube), sorted_index


def cmd_partition(args, out: Outputs) -> dict:
    from .partition import write_partition_jsonl

    cfg = _resolved(args, _MODEL_KEYS)
    cloud = _load(args.cloud)
    part, _ = _partition(cloud, cfg)
    write_partition_jsonl(part, out.add(args.out))
    counters = part.counters()
    if args.counters:
        Path(out.add(args.counters)).write_text(json.dumps(counters, indent=2))
    print(json.dumps({k: counters[k] for k in ("cells", "thr_s", "thr_v", "refine_s", "refine_v")}))
    return {"config": cfg, "inputs": [args.cloud],
            "outputs": [args.out] + ([args.counters] if args.counters else [])}


def cmd_stratify(args, out: Outputs) -> dict:
    from .partition import read_partition_jsonl
    from .stratify import assign_strata, write_stratification

    cfg = _resolved(args, _MODEL_KEYS)
    if not Path(args.partition).exists():
        raise CliError(f"input not found: {args.partition}")
    part = read_partition_jsonl(args.partition)
    strat = assign_strata(part, stratify_config(cfg))
    labels_final = Path(args.labels or Path(args.out).with_suffix(".labels.u16"))
    labels_tmp = out.add(labels_final)
    json_tmp = out.add(args.out)
    write_stratification(strat, json_tmp, labels_tmp)
    # the summary names the final labels file, not the staging name
    summary = json.loads(Path(json_tmp).read_text())
    summary["labels_path"] = labels_final.name
    Path(json_tmp).write_text(json.dumps(summary, indent=2))
    return {"config": cfg, "inputs": [args.partition], "outputs": [args.out, str(labels_final)]}


def cmd_sample(args, out: Outputs) -> dict:
    from .allocate import write_measure
    from .bench import SamplerOptions, run_sampler

    keys = dict(_MODEL_KEYS, seed="seed", m="m", alpha="alpha", grid_edge="grid_edge",
                proxy_target="proxy_target", knn_k="k")
    cfg = _resolved(args, keys)
    method = args.method
    seed = _require_seed(cfg, f"sample --method {method}") if method in STOCHASTIC_METHODS \
        else int(cfg.get("seed") or 0)
    if cfg.get("m") is None:
        raise CliError("sample needs --m")
    m = int(float(cfg["m"]))
    cloud = _load(args.cloud)
    if m > cloud.n_points and method == "random":
        raise CliError(f"budget m={m} exceeds N={cloud.n_points}")
    options = SamplerOptions(
        partition=partition_config(cfg), stratify=stratify_config(cfg), rho=float(cfg["rho"]),
        alpha=_parse_alpha(cfg.get("alpha")), grid_edge=cfg.get("grid_edge"),
        proxy_target=float(cfg.get("proxy_target") or 256.0), knn_k=int(cfg.get("knn_k") or 32),
        knn_exact=not args.approx_knn)
    measure, info = run_sampler(method, cloud, m, seed, options)
    plan = info["result"].plan if method == "m3" else None
    extra = {"method": method}
    if "draws" in info:
        extra["draws"] = info["draws"]
    idx_tmp = out.add(args.out)
    side_final = str(args.out) + ".json"
    side_tmp = out.add(side_final)
    text_tmp = out.add(args.text) if args.text else None
    write_measure(measure, plan, seed, idx_tmp, text_tmp, extra)
    os.replace(str(idx_tmp) + ".json", side_tmp)
    outputs = [args.out, side_final] + ([args.text] if args.text else [])
    return {"config": cfg, "inputs": [args.cloud], "outputs": outputs}


def _field(path) -> np.ndarray:
    p = Path(path)
    if not p.exists():
        raise CliError(f"input not found: {path}")
    if p.suffix == ".npy":
        return np.load(p)
    text = p.read_text()
    delim = "," if "," in text.splitlines()[0] else None
    try:
        return np.loadtxt(p, delimiter=delim, ndmin=1)
    except ValueError as exc:
        raise CliError(f"cannot parse field file {path}: {exc}") from None


def cmd_metrics(args, out: Outputs) -> dict:
    from .metrics import error_report

    truth, pred = _field(args.truth), _field(args.pred)
    weights = _field(args.weights) if args.weights else None
    try:
        report = error_report(truth, pred, weights)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    text = json.dumps(report, indent=2)
    print(text)
    outputs = []
    if args.out:
        Path(out.add(args.out)).write_text(text + "\n")
        outputs.append(args.out)
    inputs = [args.truth, args.pred] + ([args.weights] if args.weights else [])
    return {"config": {}, "inputs": inputs, "outputs": outputs}


def _read_index_file(path) -> np.ndarray:
    from .allocate import read_indices
    if not Path(path).exists():
        raise CliError(f"input not found: {path}")
    return read_indices(path)


def cmd_measure(args, out: Outputs) -> dict:
    from .measure import (EmpiricalMeasure, decomposition_terms, risk_gap_check, target_measure,
                          tv_distance)
    from .stratify import assign_strata

    cfg = _resolved(args, dict(_MODEL_KEYS, alpha="alpha"))
    cloud = _load(args.cloud)
    idx = _read_index_file(args.indices)
    if idx.size == 0:
        raise CliError("sample is empty")
    if idx.min() < 0 or idx.max() >= cloud.n_points or np.unique(idx).size != idx.size:
        raise CliError("sample indices must be distinct and inside the cloud")
    part, sorted_index = _partition(cloud, cfg)
    strat = assign_strata(part, stratify_config(cfg))
    alpha = _parse_alpha(cfg.get("alpha"))
    target = target_measure(strat.labels, alpha)
    mu = EmpiricalMeasure(idx).cell_measure(part.cell_of_point(sorted_index), part.n_cells, strat.labels)
    tv = tv_distance(mu, target)
    sample_levels, target_levels = mu.level_mass(), target.level_mass()
    report = {"report": args.report, "m": int(idx.size), "cells": part.n_cells, "tv": tv,
              "levels": [{"level": lv, "sample": sample_levels.get(lv, 0.0),
                          "target": target_levels.get(lv, 0.0)}
                         for lv in sorted(set(sample_levels) | set(target_levels))]}
    if args.report == "decomp":
        inter, intra = decomposition_terms(mu, strat.labels, alpha or None)
        report.update({"inter": inter, "intra": intra, "two_tv": 2 * tv,
                       "holds": bool(2 * tv <= inter + intra + 1e-12)})
    elif args.report == "riskgap":
        if not args.losses:
            raise CliError("--report riskgap needs --losses")
        losses = _field(args.losses).astype(np.float64).ravel()
        if losses.size == cloud.n_points:
            # per-point losses: each cell carries the mean loss of its points
            sums = np.bincount(part.cell_of_point(sorted_index), weights=losses, minlength=part.n_cells)
            losses = sums / part.n
        elif losses.size != part.n_cells:
            raise CliError(f"losses must have N={cloud.n_points} or |C|={part.n_cells} entries")
        bound_m = float(args.bound) if args.bound is not None else float(losses.max())
        gap, bound = risk_gap_check(losses, bound_m, mu, target, slack=math.inf)
        report.update({"M": bound_m, "gap": gap, "bound": bound, "holds": bool(gap <= bound + 1e-12)})
    text = json.dumps(report, indent=2)
    Path(out.add(args.out)).write_text(text + "\n")
    outputs = [args.out]
    if args.plot:
        from .plotting import plot_level_mass
        plot_level_mass(sample_levels, target_levels, out.add(args.plot), title=f"TV = {tv:.4f}")
        outputs.append(args.plot)
    print(json.dumps({k: report[k] for k in report if k != "levels"}))
    return {"config": cfg, "inputs": [args.cloud, args.indices] + ([args.losses] if args.losses else []),
            "outputs": outputs}


def _sizes(text: str) -> list[int]:
    try:
        return [int(float(s)) for s in text.split(",") if s.strip()]
    except ValueError:
        raise CliError(f"bad --sizes {text!r}; expected e.g. 1e5,1e6") from None


def cmd_bench(args, out: Outputs) -> dict:
    from .bench import METHODS, SamplerOptions, bench_run, write_csv, write_summary

    cfg = _resolved(args, _MODEL_KEYS)
    methods = args.methods.split(",") if args.methods else list(METHODS)
    for name in methods:
        if name not in METHODS:
            raise CliError(f"unknown method {name!r}; choose from {METHODS}")
    options = SamplerOptions(partition=partition_config(cfg), stratify=stratify_config(cfg),
                             rho=float(cfg["rho"]), knn_exact=not args.approx_knn)

    def progress(row):
        wall = "-" if row.wall_s is None else f"{row.wall_s:.4g}s"
        print(f"{row.method:>6} N={row.N:<10d} seed={row.seed} {wall:>10} {row.status}", file=sys.stderr)

    rows = bench_run(methods, _sizes(args.sizes), args.cap, range(args.seeds), args.m, args.spec,
                     options=options, progress=progress)
    write_csv(rows, out.add(args.out))
    outputs = [args.out]
    summary_path = args.summary or str(Path(args.out).with_suffix(".summary.csv"))
    summary = write_summary(rows, out.add(summary_path))
    outputs.append(summary_path)
    if args.plot:
        from .plotting import plot_bench
        plot_bench(summary, out.add(args.plot), args.cap)
        outputs.append(args.plot)
    cfg.update({"sizes": _sizes(args.sizes), "cap": args.cap, "seeds": args.seeds, "m": args.m,
                "methods": methods, "spec": args.spec})
    return {"config": cfg, "inputs": [], "outputs": outputs, "deterministic": False}


def cmd_replay(args, out: Outputs) -> dict:
    path = Path(args.manifest)
    if not path.exists():
        raise CliError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("command") == "replay":
        raise CliError("cannot replay a replay manifest")
    for p, digest in manifest.get("inputs", {}).items():
        if not Path(p).exists() or sha256(p) != digest:
            raise CliError(f"input {p} is missing or changed since the recorded run")
    status = main(list(manifest["argv"]) + ["--manifest", os.devnull])
    if status != 0:
        raise CliError(f"replayed command exited with status {status}")
    report = {"manifest": str(path), "checked": manifest.get("deterministic", True), "mismatches": []}
    if manifest.get("deterministic", True):
        for p, digest in manifest.get("outputs", {}).items():
            if sha256(p) != digest:
                report["mismatches"].append(p)
    print(json.dumps(report))
    if report["mismatches"]:
        raise CliError(f"replay produced different outputs: {report['mismatches']}")
    return {"config": {}, "inputs": [str(path)], "outputs": [], "manifest_path": os.devnull}


# -- parser ---------------------------------------------------------------------------------------

def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model hyperparameters (override the profile)")
    g.add_argument("--eps-refine", dest="eps_refine", type=float)
    g.add_argument("--g-max", dest="g_max", type=int)
    g.add_argument("--kappa", type=int)
    g.add_argument("--w-scalar", dest="w_scalar", type=float, help="weight of every scalar channel")
    g.add_argument("--w-vector", dest="w_vector", type=float, help="weight of every vector channel")
    g.add_argument("--K", type=int, help="number of scale bins")
    g.add_argument("--rho", type=float, help="per-cell fill ratio in (0, 1]")
    g.add_argument("--eps-log", dest="eps_log", type=float)
    g.add_argument("--p-lo", dest="p_lo", type=float)
    g.add_argument("--p-hi", dest="p_hi", type=float)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--profile", choices=sorted(PROFILES), default="volume")
    common.add_argument("--config", help="JSON file of hyperparameters; flags take precedence")
    common.add_argument("--manifest", help="where to write the run manifest "
                                           "(default: <first output>.manifest.json)")

    parser = argparse.ArgumentParser(prog="m3", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic cloud")
    p.add_argument("--spec", help="catalog name or JSON file")
    p.add_argument("--n", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("partition", parents=[common], help="build the variation-adaptive octree")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True, help="cells as JSON lines")
    p.add_argument("--counters", help="also write refinement counters as JSON")
    _model_flags(p)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("stratify", parents=[common], help="assign scale levels to partition cells")
    p.add_argument("--partition", required=True, help="cells JSON lines from 'partition'")
    p.add_argument("--out", required=True, help="summary JSON")
    p.add_argument("--labels", help="u16 label file (default: next to --out)")
    _model_flags(p)
    p.set_defaults(func=cmd_stratify)

    p = sub.add_parser("sample", parents=[common], help="draw a sample with one of the samplers")
    p.add_argument("--cloud", required=True)
    p.add_argument("--method", choices=("m3", "random", "grid", "proxy", "knn"), default="m3")
    p.add_argument("--m", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="u64 index file; a .json sidecar is written beside it")
    p.add_argument("--text", help="also write one index per line")
    p.add_argument("--alpha", help="level masses as JSON (inline or file)")
    p.add_argument("--grid-edge", dest="grid_edge", type=float)
    p.add_argument("--proxy-target", dest="proxy_target", type=float)
    p.add_argument("--k", type=int)
    p.add_argument("--approx-knn", action="store_true", help="Morton-window k-NN instead of exact")
    _model_flags(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("metrics", parents=[common], help="weighted and unweighted field errors")
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--weights")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("measure", parents=[common], help="measure diagnostics of a sample")
    p.add_argument("--cloud", required=True)
    p.add_argument("--indices", required=True)
    p.add_argument("--report", choices=("tv", "decomp", "riskgap"), default="tv")
    p.add_argument("--alpha")
    p.add_argument("--losses", help="per-point or per-cell losses (riskgap)")
    p.add_argument("--bound", type=float, help="loss bound M (default: max loss)")
    p.add_argument("--out", required=True)
    p.add_argument("--plot", help="PNG of per-level masses")
    _model_flags(p)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("bench", parents=[common], help="wall-clock benchmark of all samplers")
    p.add_argument("--sizes", default="1e5,1e6")
    p.add_argument("--cap", type=float, default=600.0)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--m", type=int, default=8192)
    p.add_argument("--methods", help="comma-separated subset")
    p.add_argument("--spec", default="boundary-layer")
    p.add_argument("--approx-knn", action="store_true")
    p.add_argument("--out", required=True, help="per-run CSV")
    p.add_argument("--summary", help="per-(method, N) CSV (default: next to --out)")
    p.add_argument("--plot", help="PNG of wall time and peak memory against N")
    _model_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("replay", help="re-run a manifest and verify identical outputs")
    p.add_argument("manifest")
    p.add_argument("--manifest", dest="manifest_out", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_replay, profile="volume", config=None)
    return parser


def _write_manifest(args, argv, record: dict) -> None:
    target = record.get("manifest_path") or args.manifest
    if target is None:
        outs = record.get("outputs") or []
        if not outs:
            return
        target = str(outs[0]) + ".manifest.json"
    if target == os.devnull:
        return
    manifest = {
        "version": __version__,
        "command": args.command,
        "argv": argv,
        "cwd": os.getcwd(),
        "config": record.get("config", {}),
        "threads": record.get("threads"),
        "deterministic": record.get("deterministic", True),
        "inputs": {p: sha256(p) for p in record.get("inputs", [])},
        "outputs": {str(p): sha256(p) for p in record.get("outputs", [])},
    }
    Path(target).write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    out = Outputs()
    try:
        threads = _apply_threads()
        record = args.func(args, out)
        out.commit()
        record["threads"] = threads
        _write_manifest(args, argv, record)
    except (CliError, ValueError, OSError, KeyError) as exc:
        out.discard()
        print(f"m3 {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except BaseException:
        out.discard()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
