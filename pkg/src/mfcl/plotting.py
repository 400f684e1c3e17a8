"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

LOSS_SERIES = ("L_total", "L_rec", "L_perc", "L_style", "L_adv", "L_rte", "L_rst", "D_loss")


def plot_loss_curve(rows: list[dict], path) -> Path | None:
    """Log-scale loss curves per component. Returns None for an empty log."""
    if not rows:
        return None
    path = Path(path)
    steps = np.array([r["step"] for r in rows])
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in LOSS_SERIES:
        vals = np.array([r[key] for r in rows], dtype=float)
        if np.all(vals > 0):
            ax.plot(steps, vals, label=key, lw=1.2 if key == "L_total" else 0.8)
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=4)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def plot_eval(examples: list, path, title: str = "") -> Path | None:
    """Rows of (masked input, composited output, ground truth)."""
    if not examples:
        return None
    path = Path(path)
    n = len(examples)
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for r, (row, (name, masked, comp, target)) in enumerate(zip(axes, examples)):
        for ax, img, label in zip(row, (masked, comp, target), ("input", "output", "target")):
            ax.imshow(np.clip(img, 0, 1))
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(label, fontsize=8)
        row[0].set_ylabel(Path(name).stem, fontsize=7)
    if title:
        fig.suptitle(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
