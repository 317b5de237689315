"""Segmentation metrics on label maps: DSC, IoU, pixel accuracy and HD95.

Conventions: DSC and IoU of two empty masks are 1. HD95 of two empty masks is
0; with exactly one empty mask it is undefined and returned as NaN, and the
class is reported as skipped. Boundary pixels are mask pixels with at least
one 4-neighbour outside the mask (the image border counts as outside).
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

_CROSS = ndimage.generate_binary_structure(2, 1)


def dsc(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    total = a.sum() + b.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(a, b).sum() / total


def iou(a, b) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return np.logical_and(a, b).sum() / union


def f1_score(pred, gt) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    tp = np.sum(pred & gt)
    fp = np.sum(pred & ~gt)
    fn = np.sum(~pred & gt)
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def confusion_matrix(pred, gt, num_classes: int) -> np.ndarray:
    """``cm[i, j]`` = pixels of true class i predicted as j."""
    pred, gt = np.asarray(pred).ravel(), np.asarray(gt).ravel()
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def accuracy(pred, gt, num_classes: int | None = None) -> float:
    pred, gt = np.asarray(pred, np.int64), np.asarray(gt, np.int64)
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    cm = confusion_matrix(pred, gt, num_classes)
    return np.trace(cm) / cm.sum()


def boundary(mask) -> np.ndarray:
    mask = np.asarray(mask, bool)
    return mask & ~ndimage.binary_erosion(mask, _CROSS, border_value=0)


def boundary_distances(a, b, spacing: Sequence[float] | None = None) -> np.ndarray:
    """Pooled directed distances: each boundary pixel of a to b's boundary, then b to a's."""
    ba, bb = boundary(a), boundary(b)
    to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    return np.concatenate([to_b[ba], to_a[bb]])


def _empty_case(a, b) -> float | None:
    ea, eb = not np.any(a), not np.any(b)
    if ea and eb:
        return 0.0
    if ea or eb:
        return math.nan
    return None


def hd95(a, b, spacing: Sequence[float] | None = None) -> float:
    """95th percentile (linear interpolation) of pooled boundary distances."""
    special = _empty_case(a, b)
    if special is not None:
        return special
    return float(np.percentile(boundary_distances(a, b, spacing), 95))


def hausdorff(a, b, spacing: Sequence[float] | None = None) -> float:
    """Maximum of the pooled boundary distances (symmetric Hausdorff distance)."""
    special = _empty_case(a, b)
    if special is not None:
        return special
    return float(boundary_distances(a, b, spacing).max())


@dataclass
class MetricsReport:
    per_class: dict[int, dict[str, float]]
    mean_dsc: float
    mean_iou: float
    accuracy: float
    mean_hd95: float
    skipped_classes: list[int] = field(default_factory=list)
    metadata: dict[str, object] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return json.dumps(d, sort_keys=True, indent=1, default=_json_default)

    def csv_row(self, case_id: str = "") -> dict[str, object]:
        row: dict[str, object] = {"case_id": case_id, "mean_dsc": self.mean_dsc, "mean_iou": self.mean_iou,
                                  "accuracy": self.accuracy, "mean_hd95": self.mean_hd95}
        for c, vals in sorted(self.per_class.items()):
            for k, v in vals.items():
                row[f"{k}_{c}"] = v
        return row


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o))


def _nanmean(values: Iterable[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def segmentation_report(pred, gt, num_classes: int, spacing=None, ignore_background: bool = True,
                        metadata: dict | None = None) -> MetricsReport:
    """Metrics for one label map pair (any leading shape is flattened per slice)."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if num_classes == 1:
        num_classes = 2  # binary task: label 1 is the lesion
    classes = range(1 if ignore_background else 0, num_classes)
    per_class, skipped = {}, []
    for c in classes:
        a, b = pred == c, gt == c
        h = hd95(a, b, spacing)
        if math.isnan(h):
            skipped.append(c)
        per_class[c] = {"dsc": dsc(a, b), "iou": iou(a, b), "hd95": h}
    return MetricsReport(
        per_class=per_class,
        mean_dsc=float(np.mean([v["dsc"] for v in per_class.values()])),
        mean_iou=float(np.mean([v["iou"] for v in per_class.values()])),
        accuracy=float(accuracy(pred, gt, num_classes)),
        mean_hd95=_nanmean(v["hd95"] for v in per_class.values()),
        skipped_classes=skipped,
        metadata=dict(metadata or {}),
    )


def aggregate_reports(reports: Sequence[MetricsReport], metadata: dict | None = None) -> MetricsReport:
    """Average per-sample reports (for example slices of one case) class by class."""
    if not reports:
        raise ValueError("no reports to aggregate")
    classes = sorted(reports[0].per_class)
    per_class = {}
    skipped = []
    for c in classes:
        vals = {k: [r.per_class[c][k] for r in reports] for k in ("dsc", "iou", "hd95")}
        h = _nanmean(vals["hd95"])
        if math.isnan(h):
            skipped.append(c)
        per_class[c] = {"dsc": float(np.mean(vals["dsc"])), "iou": float(np.mean(vals["iou"])), "hd95": h}
    return MetricsReport(
        per_class=per_class,
        mean_dsc=float(np.mean([v["dsc"] for v in per_class.values()])),
        mean_iou=float(np.mean([v["iou"] for v in per_class.values()])),
        accuracy=float(np.mean([r.accuracy for r in reports])),
        mean_hd95=_nanmean(v["hd95"] for v in per_class.values()),
        skipped_classes=sorted(set(skipped) | {c for r in reports for c in r.skipped_classes}),
        metadata=dict(metadata or {}),
    )


def write_csv(rows: Sequence[dict], fh: io.TextIOBase) -> None:
    fields: list[str] = []
    for row in rows:
        fields.extend(k for k in row if k not in fields)
    writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
