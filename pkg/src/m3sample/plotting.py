"""Report figures written next to the CLI's delimited output."""
from __future__ import annotations

import math
from typing import Iterable, Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rc("axes", linewidth=0.6)
plt.rc("font", size=9)

_STYLE = {"random": ("0.5", "o"), "m3": ("C3", "s"), "grid": ("C0", "^"),
          "proxy": ("C2", "D"), "knn": ("C1", "v")}


def plot_bench(summary: Iterable[Mapping], path, cap: float | None = None) -> None:
    """Mean wall time and peak memory against N, log-log, one line per method.

    Timed-out sizes are drawn as crosses on the cap line.
    """
    by_method: dict[str, list[Mapping]] = {}
    for s in summary:
        by_method.setdefault(s["method"], []).append(s)
    fig, (ax_t, ax_m) = plt.subplots(1, 2, figsize=(8, 3.2))
    for method, rows in by_method.items():
        rows = sorted(rows, key=lambda r: r["N"])
        color, marker = _STYLE.get(method, ("k", "o"))
        ok = [r for r in rows if r["status"] == "ok"]
        ax_t.plot([r["N"] for r in ok], [r["mean_wall_s"] for r in ok], marker=marker,
                  color=color, label=method, lw=1)
        late = [r for r in rows if r["status"] != "ok"]
        if late and cap:
            ax_t.plot([r["N"] for r in late], [cap] * len(late), "x", color=color, ms=7)
        mem = [r for r in ok if not math.isnan(r["mean_peak_bytes"])]
        if mem:
            ax_m.plot([r["N"] for r in mem], [r["mean_peak_bytes"] / 2**20 for r in mem],
                      marker=marker, color=color, label=method, lw=1)
    if cap:
        ax_t.axhline(cap, color="k", lw=0.5, ls="--")
    for ax, label in ((ax_t, "wall-clock (s)"), (ax_m, "peak RSS (MiB)")):
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("N")
        ax.set_ylabel(label)
    ax_t.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_level_mass(sample_mass: Mapping[int, float], target_mass: Mapping[int, float], path,
                    title: str | None = None) -> None:
    """Per-level mass of a sampling measure beside the target's."""
    levels = sorted(set(sample_mass) | set(target_mass))
    x = list(range(len(levels)))
    fig, ax = plt.subplots(figsize=(max(4.0, 0.12 * len(levels) + 2), 3))
    ax.bar([i - 0.2 for i in x], [sample_mass.get(lv, 0.0) for lv in levels], width=0.4,
           color="C3", label="sample")
    ax.bar([i + 0.2 for i in x], [target_mass.get(lv, 0.0) for lv in levels], width=0.4,
           color="0.6", label="target")
    step = max(1, len(levels) // 16)
    ax.set_xticks(x[::step])
    ax.set_xticklabels([str(lv) for lv in levels][::step])
    ax.set_xlabel("level")
    ax.set_ylabel("mass")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
