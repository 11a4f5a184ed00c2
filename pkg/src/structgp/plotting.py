"""Matplotlib figures written next to the tabular outputs."""

from __future__ import annotations

import math
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_recovery", "plot_forecast", "plot_graph"]


def _save(fig, path):
    tmp = f"{path}.tmp.png"
    fig.savefig(tmp, dpi=120, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_recovery(summary: dict, path):
    """Median and interquartile band of each metric against subject count."""
    settings = summary["settings"]
    xs = sorted(int(x) for x in settings)
    keys = [k for k in ("shd", "f1", "ari", "nmi")
            if any(settings[str(x)][k]["median"] is not None for x in xs)]
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 3), squeeze=False)
    for ax, key in zip(axes[0], keys):
        med = [settings[str(x)][key]["median"] for x in xs]
        lo = [settings[str(x)][key]["q25"] for x in xs]
        hi = [settings[str(x)][key]["q75"] for x in xs]
        ax.plot(xs, med, "o-", color="C0")
        ax.fill_between(xs, lo, hi, color="C0", alpha=0.25)
        ax.set_xlabel("subjects")
        ax.set_title(key.upper())
    fig.tight_layout()
    return _save(fig, path)


def plot_forecast(rows, path, max_panels: int = 6):
    """Forecast means with 95% bands, one panel per (subject, task) pair.

    ``rows`` is a list of dicts with keys subject_id, task_id, time, mean,
    lo95, hi95 and optionally ``truth``.
    """
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["subject_id"], r["task_id"]), []).append(r)
    keys = list(groups)[:max_panels]
    ncol = min(3, max(1, len(keys)))
    nrow = max(1, math.ceil(len(keys) / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(3.4 * ncol, 2.6 * nrow), squeeze=False)
    for ax, key in zip(axes.flat, keys):
        g = sorted(groups[key], key=lambda r: r["time"])
        t = [r["time"] for r in g]
        ax.plot(t, [r["mean"] for r in g], "-", color="C0")
        ax.fill_between(t, [r["lo95"] for r in g], [r["hi95"] for r in g], color="C0", alpha=0.25)
        if all("truth" in r for r in g):
            ax.plot(t, [r["truth"] for r in g], ".", color="k", ms=3)
        ax.set_title(f"subject {key[0]}, task {key[1]}", fontsize=9)
    for ax in list(axes.flat)[len(keys):]:
        ax.axis("off")
    fig.tight_layout()
    return _save(fig, path)


def plot_graph(structure, path, names=None):
    """Circular layout; solid black for positive and dashed red for negative edges."""
    k = structure.adjacency.shape[0]
    names = names or [str(i) for i in range(k)]
    ang = np.linspace(0, 2 * np.pi, k, endpoint=False) + np.pi / 2
    xy = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    fig, ax = plt.subplots(figsize=(4, 4))
    for u, v, w in structure.edges():
        style = "-" if w >= 0 else "--"
        color = "black" if w >= 0 else "red"
        ax.annotate("", xy=xy[v], xytext=xy[u],
                    arrowprops=dict(arrowstyle="-|>", linestyle=style, color=color,
                                    lw=0.8 + 1.5 * min(abs(w), 2.0),
                                    shrinkA=14, shrinkB=14))
    for i in range(k):
        ax.text(*xy[i], names[i], ha="center", va="center",
                bbox=dict(boxstyle="circle", fc="white", ec="0.3"))
    ax.set_xlim(-1.4, 1.4)
    ax.set_ylim(-1.4, 1.4)
    ax.set_aspect("equal")
    ax.axis("off")
    return _save(fig, path)
