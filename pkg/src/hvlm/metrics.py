"""Overlap/surface metrics for masks and macro metrics for labels.

Conventions (the usual ones, stated because they matter at the edges):
empty-vs-empty overlap metrics are 1.0, empty-vs-nonempty are 0.0; hd95 is
undefined (None) if either mask is empty. A voxel is a surface voxel if it
is on the mask and has a face neighbor off the mask (volume borders count
as off-mask). hd95 pools both directed surface-distance sets and takes a
single 95th percentile (linear interpolation).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionError

_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)  # 6-connectivity


@dataclass
class SegMetrics:
    dice: float
    iou: float
    precision: float
    sensitivity: float
    hd95: float | None

    def to_dict(self) -> dict:
        return {
            "dice": self.dice,
            "iou": self.iou,
            "precision": self.precision,
            "sensitivity": self.sensitivity,
            "hd95_mm": self.hd95,
        }


@dataclass
class ClsMetrics:
    acc: float
    recall: float
    precision: float
    f1: float

    def to_dict(self) -> dict:
        return {"acc": self.acc, "recall": self.recall, "precision": self.precision, "f1": self.f1}


def _as_bool(mask) -> np.ndarray:
    return np.asarray(mask).astype(bool)


def _counts(pred, gt):
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def _ratio(num: int, den: int) -> float:
    if den == 0:
        return 1.0  # only reachable when both masks are empty
    return num / den


def dice(pred, gt) -> float:
    tp, fp, fn = _counts(_as_bool(pred), _as_bool(gt))
    return _ratio(2 * tp, 2 * tp + fp + fn)


def iou(pred, gt) -> float:
    tp, fp, fn = _counts(_as_bool(pred), _as_bool(gt))
    return _ratio(tp, tp + fp + fn)


def precision(pred, gt) -> float:
    pred, gt = _as_bool(pred), _as_bool(gt)
    tp, fp, fn = _counts(pred, gt)
    if tp + fp == 0:
        return 1.0 if fn == 0 else 0.0
    return tp / (tp + fp)


def sensitivity(pred, gt) -> float:
    pred, gt = _as_bool(pred), _as_bool(gt)
    tp, fp, fn = _counts(pred, gt)
    if tp + fn == 0:
        return 1.0 if fp == 0 else 0.0
    return tp / (tp + fn)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    mask = _as_bool(mask)
    eroded = ndimage.binary_erosion(mask, structure=_FACE_STRUCTURE, border_value=0)
    return mask & ~eroded


def hd95(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float | None:
    pred, gt = _as_bool(pred), _as_bool(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        return None
    spacing = tuple(float(s) for s in spacing)
    ps = surface_voxels(pred)
    gs = surface_voxels(gt)
    # distance of every voxel to the nearest surface voxel of the other mask
    d_to_gt = ndimage.distance_transform_edt(~gs, sampling=spacing)
    d_to_pred = ndimage.distance_transform_edt(~ps, sampling=spacing)
    pooled = np.concatenate([d_to_gt[ps], d_to_pred[gs]])
    return float(np.percentile(pooled, 95))


def seg_metrics(pred, gt, spacing=(1.0, 1.0, 1.0)) -> SegMetrics:
    return SegMetrics(
        dice=dice(pred, gt),
        iou=iou(pred, gt),
        precision=precision(pred, gt),
        sensitivity=sensitivity(pred, gt),
        hd95=hd95(pred, gt, spacing),
    )


def cls_metrics(y_true, y_pred, n_classes: int = 3) -> ClsMetrics:
    """Accuracy plus macro-averaged precision/recall and their harmonic f1."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DimensionError(f"label shapes differ: {y_true.shape} vs {y_pred.shape}")
    acc = float(np.mean(y_true == y_pred)) if y_true.size else 0.0
    precs, recs = [], []
    for c in range(n_classes):
        tp = int(np.count_nonzero((y_pred == c) & (y_true == c)))
        fp = int(np.count_nonzero((y_pred == c) & (y_true != c)))
        fn = int(np.count_nonzero((y_pred != c) & (y_true == c)))
        precs.append(tp / (tp + fp) if tp + fp else 0.0)
        recs.append(tp / (tp + fn) if tp + fn else 0.0)
    p = float(np.mean(precs))
    r = float(np.mean(recs))
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return ClsMetrics(acc=acc, recall=r, precision=p, f1=f1)


# ---------------------------------------------------------------------------
# delimited reports (schema-tagged so outputs stay diffable)

SEG_CSV_SCHEMA = "hvlm-seg-metrics-v1"
CLS_CSV_SCHEMA = "hvlm-cls-metrics-v1"
_SEG_FIELDS = ("dice", "iou", "precision", "sensitivity", "hd95_mm")


def write_seg_metrics_csv(path: str, rows: list[tuple[str, SegMetrics]]):
    """One row per volume plus a mean row; hd95 mean skips undefined entries."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"# schema={SEG_CSV_SCHEMA}"])
        w.writerow(["volume", *_SEG_FIELDS])
        for name, m in rows:
            d = m.to_dict()
            w.writerow([name] + [("" if d[f] is None else f"{d[f]:.6f}") for f in _SEG_FIELDS])
        if rows:
            mean_row = ["mean"]
            for f in _SEG_FIELDS:
                vals = [r[1].to_dict()[f] for r in rows if r[1].to_dict()[f] is not None]
                mean_row.append(f"{np.mean(vals):.6f}" if vals else "")
            w.writerow(mean_row)
    os.replace(tmp, path)


def read_metrics_csv(path: str) -> tuple[str, list[dict]]:
    """Parse a schema-tagged CSV back into (schema, row dicts)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    schema = rows[0][0].split("schema=", 1)[1] if rows and rows[0] else ""
    header = rows[1]
    out = []
    for raw in rows[2:]:
        out.append({k: v for k, v in zip(header, raw)})
    return schema, out


def write_cls_metrics_csv(path: str, per_sample: list[tuple[str, int, int]], m: ClsMetrics):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"# schema={CLS_CSV_SCHEMA}"])
        w.writerow(["sample", "true", "pred"])
        for name, yt, yp in per_sample:
            w.writerow([name, yt, yp])
        w.writerow(["acc", f"{m.acc:.6f}", ""])
        w.writerow(["recall", f"{m.recall:.6f}", ""])
        w.writerow(["precision", f"{m.precision:.6f}", ""])
        w.writerow(["f1", f"{m.f1:.6f}", ""])
    os.replace(tmp, path)
