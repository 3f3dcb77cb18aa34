"""Matplotlib figures written next to the CSV/PLY outputs of the CLI."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import CLASS_NAMES  # noqa: E402

STYLE = {
    "font.size": 8,
    "axes.titlesize": 8,
    "axes.labelsize": 8,
    "legend.fontsize": 7,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}
# PNG metadata pinned so reruns are byte-identical
PNG_METADATA = {"Software": "pgscam"}

CLASS_COLORS = ["#804080", "#f59664", "#c8b400", "#00af00", "#00c8ff"]


def _save(fig, path):
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)


def class_name(c: int) -> str:
    return CLASS_NAMES[c] if 0 <= c < len(CLASS_NAMES) else f"class {c}"


def heatmap_panels(coords, maps: dict[str, np.ndarray], path, title: str = "") -> None:
    """Top-down scatter of every layer's full-resolution saliency."""
    names = list(maps)
    cols = min(4, len(names))
    rows = math.ceil(len(names) / cols)
    order = np.argsort(coords[:, 2], kind="stable")  # draw high points last
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows), squeeze=False)
        for ax, name in zip(axes.flat, names):
            ax.scatter(coords[order, 0], coords[order, 1], c=maps[name][order], s=1.5,
                       cmap="jet", vmin=0.0, vmax=1.0, linewidths=0)
            ax.set_title(name)
            ax.set_aspect("equal")
            ax.set_xticks([])
            ax.set_yticks([])
        for ax in list(axes.flat)[len(names):]:
            ax.axis("off")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        _save(fig, path)


def point_drop_curves(reports, path) -> None:
    """Target-class IoU and mIoU against removed points, one line per report."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(6.0, 2.4))
        for rep in reports:
            removed = [s.removed for s in rep.steps]
            style = "-o" if rep.mode == "high" else "--s"
            ax1.plot(removed, [s.target_iou for s in rep.steps], style, ms=3, label=f"{rep.mode} drop")
            ax2.plot(removed, [s.miou for s in rep.steps], style, ms=3, label=f"{rep.mode} drop")
        ax1.set_title(f"IoU ({class_name(reports[0].class_id)})")
        ax2.set_title("mean IoU")
        for ax in (ax1, ax2):
            ax.set_xlabel("points removed")
            ax.set_ylim(-0.02, 1.02)
            ax.legend(frameon=False)
        fig.tight_layout()
        _save(fig, path)


def embedding_scatter(coords2d, labels, path, title: str = "") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.0))
        for c in np.unique(labels):
            sel = labels == c
            color = CLASS_COLORS[c] if 0 <= c < len(CLASS_COLORS) else None
            ax.scatter(coords2d[sel, 0], coords2d[sel, 1], s=2, color=color,
                       label=class_name(int(c)), linewidths=0)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, markerscale=3)
        fig.tight_layout()
        _save(fig, path)


def loss_curve(losses, path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 2.4))
        ax.plot(np.arange(1, len(losses) + 1), losses, "-o", ms=2)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        fig.tight_layout()
        _save(fig, path)
