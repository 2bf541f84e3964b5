"""Localization evaluation: CAM heatmaps, box extraction, and metrics.

A heatmap is the classifier-weighted sum of final-stage feature channels,
min-max normalized to [0, 1] (constant maps normalize to all-zero).  Boxes
come from thresholding at a fraction of the heatmap maximum and taking the
tight box of the largest 4-connected foreground component; an empty
foreground falls back to the full-image box.  Box coordinates are
inclusive-exclusive pixel units.

Metrics: GT-Loc scores the box extracted from the true class's heatmap
against the ground truth; Top-1 Clas scores the class prediction; Top-1
Loc requires both the correct class and IoU >= 0.5 for the box extracted
from the predicted class's heatmap.
"""

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

logger = logging.getLogger(__name__)

# success threshold shared by every localization metric
IOU_SUCCESS_THRESHOLD = 0.5

__all__ = [
    "IOU_SUCCESS_THRESHOLD",
    "BBox",
    "LocalizationRecord",
    "MetricsReport",
    "iou",
    "extract_cam",
    "heatmap_to_bbox",
    "compute_metrics",
    "evaluate_model",
    "write_metrics_json",
    "write_metrics_csv",
]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box over [x_min, x_max) x [y_min, y_max) in pixels."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if self.x_min < 0 or self.y_min < 0:
            raise ValueError(f"box coordinates must be non-negative: {self}")
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise ValueError(f"box must have positive extent: {self}")

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(0, ix) * max(0, iy)
    return inter / (a.area + b.area - inter)


def best_iou(box: BBox, gt_boxes) -> float:
    """Largest IoU of ``box`` against any ground-truth box."""
    return max((iou(box, gt) for gt in gt_boxes), default=0.0)


def extract_cam(
    features: torch.Tensor,
    weights: torch.Tensor,
    output_size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Class activation heatmap for one image.

    ``features`` is the (C, h, w) final-stage map, ``weights`` the
    classifier row for the chosen class.  The weighted channel sum is
    bilinearly upscaled to ``output_size`` (when given), then min-max
    normalized; the normalization runs last so the returned map spans
    exactly [0, 1].
    """
    if features.dim() != 3:
        raise ValueError(f"features must be (C, H, W), got {tuple(features.shape)}")
    if weights.dim() != 1 or weights.shape[0] != features.shape[0]:
        raise ValueError(
            f"weight vector of length {tuple(weights.shape)} does not match "
            f"{features.shape[0]} feature channels"
        )
    raw = (weights[:, None, None].to(features.dtype) * features).sum(dim=0)
    if output_size is not None and tuple(raw.shape) != tuple(output_size):
        raw = F.interpolate(
            raw[None, None], size=tuple(output_size), mode="bilinear", align_corners=False
        )[0, 0]
    heat = raw.detach().cpu().numpy().astype(np.float64)
    lo, hi = heat.min(), heat.max()
    if hi > lo:
        return (heat - lo) / (hi - lo)
    return np.zeros_like(heat)


def heatmap_to_bbox(heatmap: np.ndarray, threshold_fraction: float = 0.2) -> BBox:
    """Tight box of the largest 4-connected region above the threshold.

    The threshold is ``threshold_fraction`` of the heatmap maximum; an
    empty foreground yields the full-image box.
    """
    if heatmap.ndim != 2:
        raise ValueError(f"heatmap must be 2-D, got shape {heatmap.shape}")
    if not 0.0 < threshold_fraction < 1.0:
        raise ValueError(f"threshold_fraction must be in (0, 1), got {threshold_fraction}")
    h, w = heatmap.shape
    binary = heatmap > threshold_fraction * heatmap.max()
    if not binary.any():
        logger.debug("empty foreground after thresholding; falling back to full image")
        return BBox(0, 0, w, h)
    labels, n_components = ndimage.label(binary)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    ys, xs = np.nonzero(labels == sizes.argmax())
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


@dataclass
class LocalizationRecord:
    """Per-image evaluation unit.

    ``best_iou`` scores the box from the true class's heatmap against the
    ground truth (GT-known localization); ``predicted_box`` comes from the
    predicted class's heatmap and drives Top-1 Loc.
    """

    image_id: str
    true_class: int
    predicted_class: int
    predicted_box: BBox
    gt_boxes: tuple[BBox, ...]
    best_iou: float

    def __post_init__(self):
        if not 0.0 <= self.best_iou <= 1.0:
            raise ValueError(f"best_iou must be in [0, 1], got {self.best_iou}")
        if not self.gt_boxes:
            raise ValueError("a record needs at least one ground-truth box")


@dataclass(frozen=True)
class MetricsReport:
    gt_loc: float
    top1_clas: float
    top1_loc: float
    n_records: int
    threshold_fraction: float


def compute_metrics(records, threshold_fraction: float = 0.2) -> MetricsReport:
    """Aggregate the three localization metrics (percentages) over records."""
    records = list(records)
    if not records:
        raise ValueError("cannot compute metrics over zero records")
    gt_hits = 0
    clas_hits = 0
    loc_hits = 0
    for rec in records:
        if rec.best_iou >= IOU_SUCCESS_THRESHOLD:
            gt_hits += 1
        if rec.predicted_class == rec.true_class:
            clas_hits += 1
            if best_iou(rec.predicted_box, rec.gt_boxes) >= IOU_SUCCESS_THRESHOLD:
                loc_hits += 1
    n = len(records)
    return MetricsReport(
        gt_loc=100.0 * gt_hits / n,
        top1_clas=100.0 * clas_hits / n,
        top1_loc=100.0 * loc_hits / n,
        n_records=n,
        threshold_fraction=threshold_fraction,
    )


def evaluate_model(
    model,
    samples,
    threshold_fraction: float = 0.2,
    batch_size: int = 64,
) -> tuple[list[LocalizationRecord], MetricsReport]:
    """Run the full localization protocol over a dataset.

    For every image: predict the class, extract the true-class heatmap box
    for GT-Loc, the predicted-class box for Top-1 Loc (they coincide when
    the prediction is correct), and collect a record.
    """
    from .backbone import predict

    records = []
    weights = model.classifier_weights().detach()
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        images = torch.stack(
            [torch.from_numpy(np.ascontiguousarray(s.image)) for s in batch]
        ).to(next(model.parameters()).dtype)
        scores, features = predict(model, images)
        preds = scores.argmax(dim=1)
        for i, sample in enumerate(batch):
            size = sample.image.shape[1:]
            pred_class = int(preds[i])
            true_cam = extract_cam(features[i], weights[sample.label], size)
            true_box = heatmap_to_bbox(true_cam, threshold_fraction)
            if pred_class == sample.label:
                pred_box = true_box
            else:
                pred_cam = extract_cam(features[i], weights[pred_class], size)
                pred_box = heatmap_to_bbox(pred_cam, threshold_fraction)
            records.append(
                LocalizationRecord(
                    image_id=sample.image_id,
                    true_class=sample.label,
                    predicted_class=pred_class,
                    predicted_box=pred_box,
                    gt_boxes=tuple(sample.boxes),
                    best_iou=best_iou(true_box, sample.boxes),
                )
            )
    return records, compute_metrics(records, threshold_fraction)


def _report_row(report: MetricsReport) -> dict:
    return {
        "gt_loc": report.gt_loc,
        "top1_clas": report.top1_clas,
        "top1_loc": report.top1_loc,
        "n_records": report.n_records,
        "threshold_fraction": report.threshold_fraction,
    }


def write_metrics_json(report: MetricsReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(_report_row(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_csv(report: MetricsReport, path) -> None:
    row = _report_row(report)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(row))
        writer.writeheader()
        writer.writerow(row)
