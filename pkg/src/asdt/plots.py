"""Report figures. Everything renders off-screen to files."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import IGNORE  # noqa: E402

BRANCHES = (("st", "seg-teacher"), ("s", "student"), ("fused", "fused"), ("cam", "CAM"))


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def label_palette(num_labels: int) -> np.ndarray:
    """RGB uint8 colours for labels 0..num_labels-1; background is black."""
    cmap = plt.get_cmap("tab10")
    pal = np.zeros((256, 3), np.uint8)
    for k in range(1, num_labels):
        pal[k] = (np.array(cmap((k - 1) % 10)[:3]) * 255).astype(np.uint8)
    pal[IGNORE] = 255
    return pal


def colorize(mask: np.ndarray, num_labels: int) -> np.ndarray:
    return label_palette(num_labels)[mask]


def plot_branch_miou(metrics: Mapping[str, float], path: str | Path, title: str = "") -> Path:
    names = [label for key, label in BRANCHES if np.isfinite(metrics.get(f"{key}.miou", np.nan))]
    vals = [metrics[f"{key}.miou"] for key, _ in BRANCHES if np.isfinite(metrics.get(f"{key}.miou", np.nan))]
    fig, ax = plt.subplots(figsize=(4.5, 3))
    bars = ax.bar(names, vals, color="0.55")
    for b, v in zip(bars, vals):
        ax.text(b.get_x() + b.get_width() / 2, v + 1, f"{v:.1f}", ha="center", fontsize=8)
    ax.set_ylabel("mIoU (%)")
    ax.set_ylim(0, 100)
    if title:
        ax.set_title(title)
    ax.spines[["top", "right"]].set_visible(False)
    return _save(fig, path)


def plot_ablation(rows: Sequence[tuple[str, Mapping[str, float]]], path: str | Path) -> Path:
    """Grouped bars: one group per mode, one bar per branch."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    x = np.arange(len(rows))
    width = 0.8 / 3
    for j, (key, label) in enumerate(BRANCHES[:3]):
        vals = [m.get(f"{key}.miou", np.nan) for _, m in rows]
        ax.bar(x + (j - 1) * width, np.nan_to_num(vals), width, label=label)
    ax.set_xticks(x, [mode for mode, _ in rows])
    ax.set_xlabel("distillation mode")
    ax.set_ylabel("mIoU (%)")
    ax.legend(frameon=False, fontsize=8)
    ax.spines[["top", "right"]].set_visible(False)
    return _save(fig, path)


def plot_sweep(param: str, values: Sequence[float], scores: Sequence[float], path: str | Path,
               ylabel: str = "student mIoU (%)") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3))
    ax.plot(values, scores, "o-", color="k", lw=1)
    ax.set_xlabel(param)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_loss_trace(trace: Sequence[Mapping], path: str | Path) -> Path:
    t = [r["t"] for r in trace]
    fig, ax = plt.subplots(figsize=(5.5, 3))
    for key, label in (("l_ce", "classification"), ("l_ct_st", "ct -> st"), ("l_student", "student")):
        ax.plot(t, [r[key] for r in trace], lw=0.6, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    return _save(fig, path)


def plot_examples(images: Sequence[np.ndarray], columns: Mapping[str, Sequence[np.ndarray]], num_labels: int,
                  path: str | Path) -> Path:
    """One row per image: the image, then each named label map."""
    n = len(images)
    ncol = 1 + len(columns)
    fig, axes = plt.subplots(n, ncol, figsize=(1.6 * ncol, 1.6 * n), squeeze=False)
    for i, img in enumerate(images):
        axes[i, 0].imshow(img)
        for j, (name, masks) in enumerate(columns.items(), 1):
            axes[i, j].imshow(colorize(masks[i], num_labels), interpolation="nearest")
            if i == 0:
                axes[i, j].set_title(name, fontsize=8)
        for ax in axes[i]:
            ax.set_axis_off()
    axes[0, 0].set_title("image", fontsize=8)
    return _save(fig, path)
