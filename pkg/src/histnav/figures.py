"""Matplotlib renderings saved next to the delimited outputs: loss curves per
proxy task, fine-tuning learning curves, metric bars per split, and ablation
comparison charts.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import METRIC_NAMES, MetricsReport


def _rolling_mean(xs, ys, window):
    if len(ys) <= window:
        return xs, ys
    kernel = np.ones(window) / window
    smooth = np.convolve(ys, kernel, mode="valid")
    return xs[window - 1 :], smooth


def save_loss_curves_figure(rows: list[dict], path, window: int = 50) -> None:
    tasks = sorted({r["task"] for r in rows})
    fig, ax = plt.subplots(figsize=(8, 4.5))
    for task in tasks:
        xs = np.array([r["iteration"] for r in rows if r["task"] == task])
        ys = np.array([r["loss"] for r in rows if r["task"] == task])
        xs, ys = _rolling_mean(xs, ys, window)
        ax.plot(xs, ys, label=task, linewidth=1.2)
    boundary = [r["iteration"] for r in rows if r["stage"] == 2]
    if boundary:
        ax.axvline(boundary[0], color="gray", linestyle=":", linewidth=1,
                   label="stage 2 start")
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"loss (rolling mean, w={window})")
    ax.set_title("proxy-task training losses")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_learning_curve_figure(rows: list[dict], path) -> None:
    splits = sorted({r["split"] for r in rows})
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for metric, ax in zip(("SR", "SPL"), axes):
        for split in splits:
            xs = [r["iteration"] for r in rows if r["split"] == split]
            ys = [r[metric] for r in rows if r["split"] == split]
            ax.plot(xs, ys, marker="o", markersize=3, label=split)
        ax.set_xlabel("iteration")
        ax.set_ylabel(metric)
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=8)
    fig.suptitle("fine-tuning validation curves")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_figure(reports: dict[str, MetricsReport], path) -> None:
    bounded = [m for m in METRIC_NAMES if m not in ("TL", "NE", "GP")]
    splits = sorted(reports)
    x = np.arange(len(bounded))
    width = 0.8 / max(len(splits), 1)
    fig, ax = plt.subplots(figsize=(8, 4))
    for i, split in enumerate(splits):
        vals = [reports[split].means[m] for m in bounded]
        ax.bar(x + i * width, vals, width, label=split)
    ax.set_xticks(x + width * (len(splits) - 1) / 2)
    ax.set_xticklabels(bounded)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title("evaluation metrics")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_figure(rows: list[dict], path, metric: str = "SR") -> None:
    cells = sorted({(r["variant"], r["objective"]) for r in rows})
    labels = [f"{v}\n{o}" for v, o in cells]
    means, stds = [], []
    for v, o in cells:
        vals = [r[metric] for r in rows if r["variant"] == v and r["objective"] == o]
        means.append(float(np.mean(vals)))
        stds.append(float(np.std(vals)))
    fig, ax = plt.subplots(figsize=(max(6, len(cells) * 1.2), 4))
    ax.bar(range(len(cells)), means, yerr=stds, capsize=4)
    ax.set_xticks(range(len(cells)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel(f"unseen {metric} (mean ± std over seeds)")
    ax.set_title("ablation comparison")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
