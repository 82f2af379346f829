"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = ["#0072B2", "#E69F00", "#009E73", "#CC79A7", "#56B4E9", "#D55E00"]

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.dpi": 120,
    "savefig.bbox": "tight",
}


def _format_axes(ax):
    for spine in ("top", "right"):
        ax.spines[spine].set_visible(False)
    for spine in ("left", "bottom"):
        ax.spines[spine].set_color("gray")
        ax.spines[spine].set_linewidth(0.5)
    ax.tick_params(direction="out", color="gray")
    return ax


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_training_curve(log, path: str | Path) -> Path:
    """Train loss (left axis) and UA curves (right axis) per epoch."""
    epochs = [e.epoch for e in log]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(epochs, [e.train_loss for e in log], color=COLORS[0], label="train loss")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        _format_axes(ax)
        ax2 = ax.twinx()
        for i, (attr, label) in enumerate((("train_ua", "train UA"), ("val_ua", "val UA"))):
            ys = np.array([getattr(e, attr) for e in log], dtype=float)
            if np.isfinite(ys).any():
                ax2.plot(epochs, ys, color=COLORS[i + 1], label=label)
        ax2.set_ylim(0, 1.02)
        ax2.set_ylabel("UA")
        ax2.spines["top"].set_visible(False)
        handles = ax.get_legend_handles_labels()[0] + ax2.get_legend_handles_labels()[0]
        ax.legend(handles, [h.get_label() for h in handles], frameon=False, loc="center right")
        return _save(fig, path)


def plot_confusion(confusion: np.ndarray, class_names: Sequence[str], path: str | Path, title: str = "") -> Path:
    cm = np.asarray(confusion)
    support = cm.sum(axis=1, keepdims=True)
    frac = np.divide(cm, support, out=np.zeros(cm.shape), where=support > 0)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center",
                        color="white" if frac[i, j] > 0.6 else "black")
        ax.set_xticks(range(len(class_names)), class_names, rotation=45, ha="right")
        ax.set_yticks(range(len(class_names)), class_names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_ablation(rows: Sequence[dict], path: str | Path) -> Path:
    """Bar chart of mean UA with std error bars, one bar per system."""
    names = [r["system"] for r in rows]
    means = [100 * r["ua_mean"] for r in rows]
    stds = [100 * r["ua_std"] for r in rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.2, 2.8))
        ax.bar(names, means, yerr=stds, color=[COLORS[i % len(COLORS)] for i in range(len(rows))],
               capsize=3, width=0.6)
        for x, m in enumerate(means):
            ax.text(x, m + 1, f"{m:.1f}", ha="center", va="bottom", fontsize=7)
        ax.set_ylabel("UA (%)")
        ax.set_ylim(0, 105)
        _format_axes(ax)
        return _save(fig, path)


def plot_fusion_weights(alpha: np.ndarray, labels: Sequence[str], path: str | Path) -> Path:
    """Distribution of per-utterance modality weights."""
    alpha = np.asarray(alpha)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.boxplot([alpha[:, k] for k in range(alpha.shape[1])], widths=0.5)
        ax.set_xticks(range(1, alpha.shape[1] + 1), labels)
        ax.set_ylim(0, 1)
        ax.set_ylabel("fusion weight")
        _format_axes(ax)
        return _save(fig, path)
