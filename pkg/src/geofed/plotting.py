"""Figures written next to the CSV reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "geofed": dict(color="#c0392b", lw=2.0),
    "fedavg": dict(color="#2c3e50", lw=1.5),
    "local_only": dict(color="#7f8c8d", lw=1.2, ls="--"),
    "centralized": dict(color="#27ae60", lw=1.2, ls=":"),
}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_rounds(logs, path, title="Global mIoU per round"):
    """Global and average-local mIoU curves, one line per strategy."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharey=True)
    for log in logs:
        rounds = [r.round for r in log.rows]
        style = STYLE.get(log.strategy, {})
        axes[0].plot(rounds, [100 * r.global_miou for r in log.rows], label=log.strategy, **style)
        axes[1].plot(rounds, [100 * r.average for r in log.rows], label=log.strategy, **style)
    axes[0].set_title("Global")
    axes[1].set_title("Average local")
    for ax in axes:
        ax.set_xlabel("round")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("mIoU (%)")
    axes[1].legend(frameon=False, fontsize=8)
    fig.suptitle(title, fontsize=10)
    return _finish(fig, path)


def plot_table(table: dict, path):
    """Grouped bars: per-institution, Average and Global for every strategy."""
    strategies = list(table)
    columns = list(next(iter(table.values())))
    x = np.arange(len(columns))
    width = 0.8 / len(strategies)
    fig, ax = plt.subplots(figsize=(1.2 * len(columns) + 2, 3.4))
    for k, name in enumerate(strategies):
        vals = [100 * table[name][c] for c in columns]
        ax.bar(x + (k - (len(strategies) - 1) / 2) * width, vals, width,
               label=name, color=STYLE.get(name, {}).get("color"))
    ax.set_xticks(x)
    ax.set_xticklabels(columns, fontsize=8)
    ax.set_ylabel("mIoU (%)")
    ax.legend(frameon=False, fontsize=8, ncol=len(strategies))
    ax.grid(axis="y", alpha=0.3)
    return _finish(fig, path)
