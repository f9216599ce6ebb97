"""Matplotlib figures written next to the CSV/PGM report artifacts.

All figures go through :func:`save`, which strips PNG metadata so that
re-running a command reproduces identical bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from idqn.env import Action  # noqa: E402

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "svg.hashsalt": "idqn",
}


def save(fig, path: str | Path, dpi: int = 100) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=dpi, metadata={"Software": None})
    plt.close(fig)
    return path


def action_labels(n: int) -> list[str]:
    return [Action(a).name.title() if a < len(Action) else str(a) for a in range(n)]


def training_curve(episode_steps: Sequence[int], returns: Sequence[float], path, window: int = 20, eval_steps=None, eval_returns=None) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(episode_steps, returns, color="0.75", lw=0.8, label="episode return")
        if len(returns) >= window:
            smooth = np.convolve(returns, np.ones(window) / window, mode="valid")
            ax.plot(episode_steps[window - 1 :], smooth, color="C0", label=f"{window}-episode mean")
        if eval_steps is not None and len(eval_steps):
            ax.plot(eval_steps, eval_returns, "o-", color="C3", ms=3, label="evaluation")
        ax.set_xlabel("environment step")
        ax.set_ylabel("return")
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return save(fig, path)


def loss_curves(steps: Sequence[int], losses: dict[str, Sequence[float]], path) -> Path:
    with plt.rc_context(RC):
        fig, axes = plt.subplots(len(losses), 1, figsize=(6, 1.4 * len(losses)), sharex=True)
        axes = np.atleast_1d(axes)
        for ax, (name, vals) in zip(axes, losses.items()):
            ax.plot(steps, vals, lw=0.6)
            ax.set_ylabel(name)
        axes[-1].set_xlabel("environment step")
        fig.tight_layout()
        return save(fig, path)


def attention_heatmap(weights: np.ndarray, values: np.ndarray, path, title: str = "") -> Path:
    """Rows are actions, columns value supports; darker cells carry more attention."""
    a, n = weights.shape
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(0.45 * n + 1.5, 0.4 * a + 1.0))
        im = ax.imshow(weights, cmap="Greys", vmin=0.0, vmax=1.0, aspect="auto")
        ax.set_xticks(range(n), [f"{v:.1f}" for v in values], rotation=90)
        ax.set_yticks(range(a), action_labels(a))
        ax.set_xlabel("value support")
        if title:
            ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.04)
        fig.tight_layout()
        return save(fig, path)


def image_grid(images: np.ndarray, path, row_labels=None, col_labels=None, cmap: str = "gray") -> Path:
    """R×C grid of 2-D images (e.g. the decoded key gallery)."""
    rows, cols = images.shape[:2]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, cols, figsize=(1.1 * cols + 0.6, 1.1 * rows * images.shape[2] / images.shape[3] + 0.4), squeeze=False)
        for r in range(rows):
            for c in range(cols):
                ax = axes[r, c]
                ax.imshow(np.clip(images[r, c], 0, 1), cmap=cmap, vmin=0, vmax=1, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if row_labels is not None and c == 0:
                    ax.set_ylabel(row_labels[r])
                if col_labels is not None and r == 0:
                    ax.set_title(col_labels[c], fontsize=7)
        fig.tight_layout()
        return save(fig, path)


def saliency_overlay(frame: np.ndarray, saliency: np.ndarray, path, title: str = "") -> Path:
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(6, 3))
        axes[0].imshow(frame, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        axes[0].set_title("observation")
        axes[1].imshow(frame, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        peak = saliency.max()
        axes[1].imshow(saliency / peak if peak > 0 else saliency, cmap="hot", alpha=0.6, vmin=0, vmax=1)
        axes[1].set_title(title or "saliency")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        return save(fig, path)
