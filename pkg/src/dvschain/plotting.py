"""PNG figures for scenario trajectories and benchmark sweeps."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

AXIS_LABELS = {"send_rate": "send rate (tps)", "tx_count": "transactions", "workers": "workers"}


def plot_trajectory(trajectory: Sequence[Mapping], threshold: float, path, log: Sequence[Mapping] = ()) -> Path:
    """Minimum VSI per monitoring unit over logical time, with control events marked."""
    fig, ax = plt.subplots(figsize=(7, 4))
    units = sorted({r["unit"] for r in trajectory}, key=lambda u: (u.count("+"), u))
    for unit in units:
        rows = [r for r in trajectory if r["unit"] == unit]
        ax.plot([r["t"] for r in rows], [r["min_vsi"] for r in rows], marker="o", ms=3, lw=1.2,
                label=f"group {unit}")
    ax.axhline(threshold, color="k", ls="--", lw=0.8, label="threshold")
    markers = {"disturbance": ("tab:red", ":"), "action": ("tab:green", "-"),
               "merge": ("tab:purple", "-."), "split": ("tab:gray", "-.")}
    seen = set()
    for e in log:
        style = markers.get(e["event"])
        if style is None:
            continue
        ax.axvline(e["t"], color=style[0], ls=style[1], lw=0.8,
                   label=None if e["event"] in seen else e["event"])
        seen.add(e["event"])
    ax.set_xlabel("logical time (ms)")
    ax.set_ylabel("min VSI")
    ax.set_ylim(bottom=min(0.0, *(r["min_vsi"] for r in trajectory)) if trajectory else 0.0, top=1.05)
    ax.legend(fontsize=8, loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_sweep(axis: str, series: Mapping[str, Sequence], path) -> Path:
    """Throughput and average latency against the swept parameter, one line per network model."""
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    for name, reports in series.items():
        xs = [getattr(r.spec, axis) for r in reports]
        top.plot(xs, [r.throughput for r in reports], marker="o", label=name)
        bottom.plot(xs, [r.avg_latency for r in reports], marker="s", label=name)
    top.set_ylabel("throughput (tps)")
    bottom.set_ylabel("avg latency (ms)")
    bottom.set_xlabel(AXIS_LABELS.get(axis, axis))
    for ax in (top, bottom):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
