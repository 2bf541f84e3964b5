"""Rendering: heatmap PNGs, box overlays, and report figures.

Heatmaps are color-mapped so that values 0 and 1 land exactly on the
colormap endpoints.  Overlays blend the input with the color-mapped
heatmap and draw ground-truth boxes in pure red and predicted boxes in
pure green.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib import colormaps
from PIL import Image

GT_COLOR = (255, 0, 0)
PRED_COLOR = (0, 255, 0)
DEFAULT_CMAP = "jet"

__all__ = [
    "GT_COLOR",
    "PRED_COLOR",
    "DEFAULT_CMAP",
    "colorize_heatmap",
    "draw_box",
    "make_overlay",
    "save_image_png",
    "save_heatmap_png",
    "save_overlay_png",
    "plot_metrics_figure",
    "plot_sweep_figure",
]


def _to_uint8_hwc(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    return (
        np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    )


def colorize_heatmap(heatmap: np.ndarray, cmap: str = DEFAULT_CMAP) -> np.ndarray:
    """Map a [0, 1] heatmap through a colormap to (H, W, 3) uint8."""
    table = colormaps[cmap]
    rgba = table(np.clip(heatmap, 0.0, 1.0), bytes=True)
    return rgba[..., :3]


def draw_box(canvas: np.ndarray, box, color, width: int = 1) -> None:
    """Paint a box border in-place on an (H, W, 3) uint8 canvas."""
    h, w, _ = canvas.shape
    x0, y0 = max(box.x_min, 0), max(box.y_min, 0)
    x1, y1 = min(box.x_max, w), min(box.y_max, h)
    col = np.array(color, dtype=np.uint8)
    for k in range(width):
        if y0 + k < h:
            canvas[y0 + k, x0:x1] = col
        if y1 - 1 - k >= 0:
            canvas[y1 - 1 - k, x0:x1] = col
        if x0 + k < w:
            canvas[y0:y1, x0 + k] = col
        if x1 - 1 - k >= 0:
            canvas[y0:y1, x1 - 1 - k] = col


def make_overlay(
    image: np.ndarray,
    heatmap: np.ndarray,
    gt_boxes=(),
    pred_box=None,
    cmap: str = DEFAULT_CMAP,
) -> np.ndarray:
    """Blend image and heatmap 50/50, then draw GT (red) and predicted
    (green) boxes."""
    base = _to_uint8_hwc(image).astype(np.float64)
    heat = colorize_heatmap(heatmap, cmap).astype(np.float64)
    overlay = np.round(0.5 * base + 0.5 * heat).astype(np.uint8)
    for box in gt_boxes:
        draw_box(overlay, box, GT_COLOR)
    if pred_box is not None:
        draw_box(overlay, pred_box, PRED_COLOR)
    return overlay


def save_image_png(image: np.ndarray, path) -> None:
    Image.fromarray(_to_uint8_hwc(image)).save(path)


def save_heatmap_png(heatmap: np.ndarray, path, cmap: str = DEFAULT_CMAP) -> None:
    Image.fromarray(colorize_heatmap(heatmap, cmap)).save(path)


def save_overlay_png(overlay: np.ndarray, path) -> None:
    Image.fromarray(overlay).save(path)


def plot_metrics_figure(report, path) -> None:
    """Bar chart of the three localization metrics."""
    names = ["GT-Loc", "Top-1 Clas", "Top-1 Loc"]
    values = [report.gt_loc, report.top1_clas, report.top1_loc]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    bars = ax.bar(names, values, color=["#4878d0", "#ee854a", "#6acc64"])
    ax.set_ylim(0, 100)
    ax.set_ylabel("accuracy (%)")
    ax.set_title(f"n={report.n_records}, threshold={report.threshold_fraction:g}")
    for bar, value in zip(bars, values):
        ax.annotate(
            f"{value:.1f}",
            (bar.get_x() + bar.get_width() / 2, value),
            ha="center",
            va="bottom",
            fontsize=9,
        )
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep_figure(rows, axis_name: str, path) -> None:
    """Metric curves across one ablation sweep.

    ``rows`` are dicts with keys value, gt_loc, top1_clas, top1_loc.
    """
    labels = [str(row["value"]) for row in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    for metric, marker in (("gt_loc", "o"), ("top1_clas", "s"), ("top1_loc", "^")):
        ax.plot(x, [row[metric] for row in rows], marker=marker, label=metric)
    ax.set_xticks(x, labels)
    ax.set_xlabel(axis_name)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
