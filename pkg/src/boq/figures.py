"""Matplotlib renderings written next to the delimited outputs.

Every report-producing command emits both machine-readable data (CSV, text
tables, graymaps) and a rendered figure of the same content. Figures are
written atomically with pinned metadata so identical runs produce identical
bytes.
"""

from __future__ import annotations

import io
from pathlib import Path
from typing import Sequence, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import atomic_write_bytes

_SAVE_KW = {"dpi": 120, "metadata": {"Software": "boq"}, "format": "png"}


def _save(fig, path: Union[str, Path]) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, **_SAVE_KW)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def save_attention_figure(
    grids: Sequence[np.ndarray],
    query_indices: Sequence[int],
    block_index: int,
    path: Union[str, Path],
) -> None:
    """One heatmap panel per exported query."""
    n = len(grids)
    fig, axes = plt.subplots(1, n, figsize=(3 * n, 3.2), squeeze=False)
    for ax, grid, qi in zip(axes[0], grids, query_indices):
        im = ax.imshow(grid, cmap="viridis", interpolation="nearest")
        ax.set_title(f"block {block_index}, query {qi}")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.suptitle("Cross-attention weight over the feature grid")
    fig.tight_layout()
    _save(fig, path)


def save_training_curves(metrics, path: Union[str, Path]) -> None:
    """Training loss and validation recall@1 against the epoch index."""
    epochs = [m.epoch for m in metrics]
    fig, ax1 = plt.subplots(figsize=(6.4, 4.0))
    ax1.plot(epochs, [m.train_loss for m in metrics], color="tab:blue", label="train loss")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(
        epochs,
        [m.val_recall1 for m in metrics],
        color="tab:orange",
        label="val recall@1",
    )
    ax2.set_ylabel("val recall@1", color="tab:orange")
    ax2.set_ylim(-0.02, 1.02)
    fig.tight_layout()
    _save(fig, path)


def save_recall_figure(recalls: dict[int, float], path: Union[str, Path]) -> None:
    """Bar chart of recall@k for the evaluated k values."""
    ks = sorted(recalls)
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    ax.bar([str(k) for k in ks], [recalls[k] for k in ks], color="tab:green")
    ax.set_xlabel("k")
    ax.set_ylabel("recall@k")
    ax.set_ylim(0.0, 1.05)
    for i, k in enumerate(ks):
        ax.text(i, recalls[k] + 0.01, f"{recalls[k]:.4f}", ha="center", fontsize=8)
    fig.tight_layout()
    _save(fig, path)
