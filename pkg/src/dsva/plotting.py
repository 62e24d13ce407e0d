"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import io
import math
import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dsva.core import atomic_write  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    # no metadata: keeps reruns byte-identical
    fig.savefig(buf, format="png", dpi=120, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def plot_calibration(gammas: Sequence[float], reports, path, best: float | None = None) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        x = np.asarray(gammas, dtype=float)
        positive = x > 0
        # symlog keeps gamma = 0 on the axis
        ax.set_xscale("symlog", linthresh=float(x[positive].min()) if positive.any() else 1e-4)
        ax.plot(x, [r.gzsl_seen for r in reports], "o-", ms=3, label="seen (S)")
        ax.plot(x, [r.gzsl_unseen for r in reports], "s-", ms=3, label="unseen (U)")
        ax.plot(x, [r.harmonic for r in reports], "k^-", ms=3, label="harmonic (H)")
        if best is not None:
            ax.axvline(best, color="0.6", ls="--", lw=0.8)
        ax.set_xlabel(r"calibration $\gamma$")
        ax.set_ylabel("accuracy")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(frameon=False)
        _save(fig, path)


def plot_attention(image: np.ndarray, maps: np.ndarray, names: Sequence[str], path, max_maps: int = 12) -> None:
    """Input image, mean attention and the first ``max_maps`` attribute maps."""
    maps = np.asarray(maps)
    shown = min(len(names), max_maps)
    cols = min(shown + 2, 7)
    rows = math.ceil((shown + 2) / cols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.7 * rows), squeeze=False)
        panels = [("image", image), ("mean", maps.mean(axis=0))] + [(names[i], maps[i]) for i in range(shown)]
        for ax in axes.ravel():
            ax.axis("off")
        for ax, (title, data) in zip(axes.ravel(), panels):
            if data.ndim == 3:
                ax.imshow(np.clip(data, 0, 1))
            else:
                ax.imshow(data, cmap="viridis", interpolation="nearest")
            ax.set_title(title)
        _save(fig, path)


def plot_crop(image: np.ndarray, mean_map: np.ndarray, mask: np.ndarray, box, crop: np.ndarray, path) -> None:
    k = mask.shape[0]
    H, W = image.shape[:2]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(7.5, 2))
        axes[0].imshow(np.clip(image, 0, 1))
        ph, pw = H / k, W / k
        rect = plt.Rectangle(
            (box.col_min * pw - 0.5, box.row_min * ph - 0.5),
            (box.col_max - box.col_min + 1) * pw,
            (box.row_max - box.row_min + 1) * ph,
            fill=False, ec="w", lw=1.2,
        )
        axes[0].add_patch(rect)
        axes[0].set_title("image + box")
        axes[1].imshow(mean_map, cmap="viridis", interpolation="nearest")
        axes[1].set_title("mean attention")
        axes[2].imshow(mask, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        axes[2].set_title("mask")
        axes[3].imshow(np.clip(crop, 0, 1))
        axes[3].set_title("crop")
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        _save(fig, path)


def plot_training(history: Sequence[dict], path) -> None:
    epochs = [r["epoch"] for r in history]
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(7, 2.6))
        ax0.plot(epochs, [r["losses"]["total"] for r in history], "k-")
        ax0.set_xlabel("epoch")
        ax0.set_ylabel("training loss")
        with_metrics = [r for r in history if "metrics" in r]
        if with_metrics:
            e = [r["epoch"] for r in with_metrics]
            for key, label in (("zsl_top1", "ZSL top-1"), ("gzsl_unseen", "U"), ("gzsl_seen", "S"), ("harmonic", "H")):
                ax1.plot(e, [r["metrics"][key] for r in with_metrics], label=label)
            ax1.set_ylim(-0.02, 1.02)
            ax1.legend(frameon=False, ncol=2)
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("accuracy")
        warm = [r["epoch"] for r in history if r["phase"] == "warmup"]
        if warm:
            for ax in (ax0, ax1):
                ax.axvspan(0.5, max(warm) + 0.5, color="0.92", lw=0)
        _save(fig, path)
