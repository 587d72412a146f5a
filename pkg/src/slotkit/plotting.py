"""Matplotlib figures written next to the delimited report files.

Everything renders through the Agg backend straight to disk; nothing here
opens a window. Figures are a reading aid, the text reports stay the
source of truth.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

plt.rcParams.update({
    "figure.dpi": 110,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
})


def save_loss_curve(history, path, title="training loss"):
    """history: iterable of (step, value, ...) rows."""
    rows = np.asarray([(r[0], r[1]) for r in history], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(rows[:, 0], rows[:, 1], lw=0.8)
    if (rows[:, 1] > 0).all():
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_metric_bars(scores: dict, path, title="evaluation"):
    keys = [k for k, v in scores.items() if isinstance(v, (int, float))]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(range(len(keys)), [scores[k] for k in keys], color="#4878a8")
    ax.set_xticks(range(len(keys)), keys, rotation=20)
    ax.set_ylim(0, max(1.0, max(scores[k] for k in keys) * 1.1) if keys else 1.0)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_ablation_curves(rows, path):
    """rows: (T, mse, fg_ari, miou) tuples, one per sweep point."""
    rows = sorted(rows)
    ts = [r[0] for r in rows]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    for ax, idx, name in zip(axes, (1, 2, 3), ("mse", "fg_ari", "miou")):
        ax.plot(ts, [r[idx] for r in rows], marker="o")
        ax.set_xscale("log")
        ax.set_xlabel("diffusion steps T")
        ax.set_title(name)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_image_grid(images, path, cols=4, title=None):
    """images: (N, 3, H, W) float in [0,1] or (N, H, W) integer masks."""
    images = np.asarray(images)
    n = images.shape[0]
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2 * cols, 2 * rows), squeeze=False)
    for i in range(rows * cols):
        ax = axes[i // cols][i % cols]
        ax.axis("off")
        if i >= n:
            continue
        img = images[i]
        if img.ndim == 3:
            ax.imshow(np.clip(np.moveaxis(img, 0, -1), 0, 1))
        else:
            ax.imshow(img, cmap="tab10", interpolation="nearest")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
