"""Figure rendering for the CLI report path.

Figures are a convenience layer next to the delimited outputs: the CSV and
JSON files remain the canonical artifacts, and every plot here is derived
from them (or from the same in-memory state that produced them).
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import percentile

_SAVE = {"dpi": 150, "bbox_inches": "tight"}


def toy_improvement_heatmap(rows: list[dict], path) -> Path:
    """Mean AF improvement over the (sigma0, sigma_eps) grid, one cell each."""
    sigma0 = sorted({row["sigma0"] for row in rows})
    sigma_eps = sorted({row["sigma_eps"] for row in rows})
    grid = np.full((len(sigma_eps), len(sigma0)), np.nan)
    for row in rows:
        i = sigma_eps.index(row["sigma_eps"])
        j = sigma0.index(row["sigma0"])
        grid[i, j] = row["mean_improvement"]

    fig, ax = plt.subplots(figsize=(1.2 * len(sigma0) + 2, 1.0 * len(sigma_eps) + 1.5))
    vmax = np.nanmax(np.abs(grid))
    im = ax.imshow(grid, origin="lower", cmap="RdBu_r", vmin=-vmax, vmax=vmax, aspect="auto")
    ax.set_xticks(range(len(sigma0)), [f"{v:g}" for v in sigma0])
    ax.set_yticks(range(len(sigma_eps)), [f"{v:g}" for v in sigma_eps])
    ax.set_xlabel(r"training distribution sd $\sigma_0$")
    ax.set_ylabel(r"label noise sd $\sigma_\epsilon$")
    ax.set_title("Mean objective improvement from oracle retraining")
    for i in range(len(sigma_eps)):
        for j in range(len(sigma0)):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:+.3f}", ha="center", va="center", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return Path(path)


def trajectory_figure(noaf_trajectory, af_trajectory, gt, path) -> Path:
    """Oracle vs ground-truth medians per iteration for both arms."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4), sharey=True)
    for ax, trajectory, title in (
        (axes[0], noaf_trajectory, "fixed oracle"),
        (axes[1], af_trajectory, "autofocused"),
    ):
        its, oracle_med, gt_med, gt_lo, gt_hi = [], [], [], [], []
        for rec in trajectory.records:
            its.append(rec.iteration)
            oracle_med.append(percentile(rec.oracle_means, 50.0))
            gt_vals = np.asarray(gt.expectation(rec.samples), dtype=float)
            gt_med.append(percentile(gt_vals, 50.0))
            gt_lo.append(percentile(gt_vals, 15.0))
            gt_hi.append(percentile(gt_vals, 85.0))
        ax.plot(its, oracle_med, color="tab:green", label="oracle median")
        ax.plot(its, gt_med, color="tab:purple", label="ground-truth median")
        ax.fill_between(its, gt_lo, gt_hi, color="tab:purple", alpha=0.2, linewidth=0)
        ax.set_title(title)
        ax.set_xlabel("iteration")
    axes[0].set_ylabel("property value")
    axes[0].legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return Path(path)


def compare_figure(rows: list[dict], means: dict, path) -> Path:
    """Per-seed paired differences with their mean, one panel per metric."""
    metrics = list(means)
    fig, axes = plt.subplots(1, len(metrics), figsize=(2.4 * len(metrics), 3.2))
    for ax, metric in zip(np.atleast_1d(axes), metrics):
        values = [row[metric] for row in rows]
        ax.axhline(0.0, color="grey", linewidth=0.8)
        ax.plot(np.zeros(len(values)), values, "o", alpha=0.5, color="tab:blue")
        ax.plot([0], [means[metric]], "_", markersize=26, color="tab:red")
        ax.set_xticks([])
        ax.set_title(metric, fontsize=9)
    fig.suptitle("autofocused minus fixed-oracle, per seed (red: mean)")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return Path(path)
