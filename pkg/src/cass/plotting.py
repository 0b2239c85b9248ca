"""Matplotlib figures for the report command (file output only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _axis_sort_key(value):
    try:
        return (0, float(value), "")
    except ValueError:
        return (1, 0.0, value)


def robustness_series(table, axis, path, metric_filter="f1_macro"):
    """Mean ± one standard deviation of every matching metric against the axis values."""
    rows = [r for r in table if r["axis"] == axis and metric_filter in r["metric_name"]]
    if not rows:
        return None
    values = sorted({r["value"] for r in rows}, key=_axis_sort_key)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted({r["metric_name"] for r in rows}):
        by_value = {r["value"]: r for r in rows if r["metric_name"] == name}
        xs = [i for i, v in enumerate(values) if v in by_value]
        means = [by_value[values[i]]["mean"] for i in xs]
        errs = [np.sqrt(by_value[values[i]]["variance"]) for i in xs]
        ax.errorbar(xs, means, yerr=errs, marker="o", capsize=3, label=name)
    ax.set_xticks(range(len(values)), values)
    ax.set_xlabel(axis)
    ax.set_ylabel(metric_filter)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def loss_curves(traces, path, key="loss", ylabel="pretraining loss"):
    """One line per named trace of per-epoch rows."""
    if not traces:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, trace in traces.items():
        ax.plot([r["epoch"] for r in trace], [r[key] for r in trace], label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    if len(traces) <= 10:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def attention_panels(grids, path):
    """Side-by-side attention maps on a shared [0, 1] color scale."""
    if not grids:
        return None
    fig, axes = plt.subplots(1, len(grids), figsize=(2.2 * len(grids) + 0.8, 2.6), squeeze=False, layout="constrained")
    for ax, (name, grid) in zip(axes[0], grids.items()):
        im = ax.imshow(grid, vmin=0.0, vmax=1.0, cmap="inferno")
        ax.set_title(name, fontsize=8)
        ax.axis("off")
    fig.colorbar(im, ax=list(axes[0]), shrink=0.8)
    return _save(fig, path)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
