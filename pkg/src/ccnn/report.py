"""Figures written next to the JSON outputs: density renderings and loss curves."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
})


def density_figure(image: np.ndarray, density: np.ndarray, path, title: str = "",
                   gt_density: np.ndarray | None = None):
    """Input image beside the predicted (and optionally ground-truth) density."""
    panels = [("input", image), (f"predicted ({density.sum():.1f})", density)]
    if gt_density is not None:
        panels.append((f"ground truth ({gt_density.sum():.1f})", gt_density))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.0))
    for ax, (label, arr) in zip(axes, panels):
        if label == "input":
            ax.imshow(arr, cmap="gray", vmin=0, vmax=1)
        else:
            im = ax.imshow(arr, cmap="jet")
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        ax.set_title(label)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title)
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def loss_figure(history: Sequence[dict], path, val: Sequence[dict] = ()):
    steps = [r["step"] for r in history]
    losses = [r["loss"] for r in history]
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    ax.plot(steps, losses, lw=0.8, color="k", label="train loss")
    ax.set_xlabel("step")
    ax.set_ylabel("Euclidean density loss")
    ax.set_yscale("log")
    if val:
        # place each validation point at the last step of its epoch
        end_step = {r["epoch"]: r["step"] for r in history}
        ax2 = ax.twinx()
        ax2.plot([end_step.get(r["epoch"], 0) for r in val], [r["mae"] for r in val], "o-",
                 color="tab:red", ms=3, label="val MAE")
        ax2.set_ylabel("val MAE", color="tab:red")
    ax.legend(loc="upper right", frameon=False)
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def latency_figure(latencies: Sequence[float], path, title: str = ""):
    fig, ax = plt.subplots(figsize=(4.0, 2.8))
    ax.hist(np.asarray(latencies) * 1e3, bins=min(30, max(5, len(latencies) // 2)), color="0.4")
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel("runs")
    if title:
        ax.set_title(title)
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
