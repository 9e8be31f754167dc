"""Matplotlib rendering of report artifacts.

Figures are written next to the delimited outputs they visualize: entropy
and mutual-information heatmaps for grid predictions, reliability diagrams
for calibration curves, and grouped bars for method comparisons.  Rendering
is headless (Agg) and deterministic apart from PNG encoder metadata.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ShapeError

__all__ = [
    "save_uncertainty_maps",
    "save_calibration_figure",
    "save_compare_figure",
]

_RC = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
}


def _grid_shape(points: np.ndarray) -> int:
    resolution = round(math.sqrt(points.shape[0]))
    if resolution * resolution != points.shape[0]:
        raise ShapeError(f"{points.shape[0]} prediction rows do not form a square grid")
    return resolution


def save_uncertainty_maps(
    path,
    points: np.ndarray,
    entropy: np.ndarray,
    mi: np.ndarray,
    train_points: np.ndarray | None = None,
    train_labels: np.ndarray | None = None,
    title: str = "",
) -> None:
    """Side-by-side entropy / mutual-information heatmaps over a square grid."""
    resolution = _grid_shape(points)
    extent = (
        points[:, 0].min(), points[:, 0].max(),
        points[:, 1].min(), points[:, 1].max(),
    )
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(1, 2, figsize=(7.2, 3.1), constrained_layout=True)
        for ax, values, label in (
            (axes[0], entropy, "entropy (nats)"),
            (axes[1], mi, "mutual information (nats)"),
        ):
            # row-major over (x0, x1): axis 0 is x0, so transpose for imshow
            image = values.reshape(resolution, resolution).T
            im = ax.imshow(image, origin="lower", extent=extent, cmap="viridis", aspect="auto")
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
            if train_points is not None:
                colors = train_labels if train_labels is not None else "k"
                ax.scatter(
                    train_points[:, 0], train_points[:, 1],
                    c=colors, cmap="coolwarm", s=4, linewidths=0, alpha=0.8,
                )
            ax.set_xlabel("x0")
            ax.set_ylabel("x1")
            ax.set_title(label)
        if title:
            fig.suptitle(title)
        fig.savefig(path)
        plt.close(fig)


def save_calibration_figure(path, curve, title: str = "") -> None:
    """Reliability diagram from (bin_confidence, bin_accuracy, bin_count) rows."""
    occupied = [(c, a) for c, a, n in curve if n > 0]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.6, 3.4), constrained_layout=True)
        ax.plot([0, 1], [0, 1], "--", color="gray", linewidth=1, label="ideal")
        if occupied:
            conf, acc = zip(*occupied)
            ax.plot(conf, acc, "o-", color="C0", markersize=4, label="model")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("confidence")
        ax.set_ylabel("accuracy")
        ax.legend(loc="upper left", frameon=False)
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)


def save_compare_figure(path, rows: list[tuple[str, dict]], title: str = "") -> None:
    """Grouped bars of the bounded fidelity metrics across methods."""
    fields = [
        f
        for f in ("agreement", "variance", "ece", "odd_auroc")
        if any(r.get(f) is not None for _, r in rows)
    ]
    if not fields:
        fields = ["accuracy"]
    names = [name for name, _ in rows]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(names), 3.2), constrained_layout=True)
        x = np.arange(len(names))
        width = 0.8 / len(fields)
        for i, metric in enumerate(fields):
            values = [r.get(metric) if r.get(metric) is not None else 0.0 for _, r in rows]
            ax.bar(x + i * width, values, width, label=metric)
        ax.set_xticks(x + width * (len(fields) - 1) / 2)
        ax.set_xticklabels(names, rotation=15)
        ax.set_ylabel("value")
        ax.legend(frameon=False, fontsize=8)
        if title:
            ax.set_title(title)
        fig.savefig(path)
        plt.close(fig)
