"""Static figures: loss curves and ablation comparisons."""

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib
import numpy as np

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

PLOT_STYLE = {
    "axes.labelsize": 10,
    "font.size": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_loss_curves(rows: Sequence[Dict[str, float]], path, terms: Sequence[str] = ("rgb", "depth", "eikonal", "sparse", "total")) -> Path:
    """Log-scale loss terms against iteration."""
    with plt.rc_context(PLOT_STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        iterations = [r["iteration"] for r in rows]
        for term in terms:
            values = [max(float(r[term]), 1e-12) for r in rows]
            ax.plot(iterations, values, label=term, linewidth=1.2)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(frameon=False, ncol=len(terms))
        return _save(fig, path)


def plot_ablation(table: List[Dict[str, object]], key: str, metrics: Sequence[str], path, title: str = "") -> Path:
    """One panel per metric, median over seeds with min/max whiskers per setting."""
    settings: List[object] = []
    for row in table:
        if row[key] not in settings:
            settings.append(row[key])
    with plt.rc_context(PLOT_STYLE):
        fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 3.0), squeeze=False)
        for ax, metric in zip(axes[0], metrics):
            medians, lows, highs = [], [], []
            for setting in settings:
                values = sorted(float(r[metric]) for r in table if r[key] == setting)
                mid = float(np.median(values))
                medians.append(mid)
                lows.append(mid - values[0])
                highs.append(values[-1] - mid)
            positions = list(range(len(settings)))
            ax.errorbar(positions, medians, yerr=[lows, highs], fmt="o-", capsize=3, linewidth=1.2)
            ax.set_xticks(positions)
            ax.set_xticklabels([str(s) for s in settings])
            ax.set_xlabel(key)
            ax.set_ylabel(metric)
        if title:
            fig.suptitle(title)
        return _save(fig, path)
