"""Confusion matrices and intersection-over-union."""
from __future__ import annotations

import numpy as np

from .datasets import IGNORE


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.k = int(num_classes)
        if counts is None:
            counts = np.zeros((self.k, self.k), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (self.k, self.k):
            raise ValueError(f"counts must be {self.k}x{self.k}")

    def update(self, pred, gt, ignore_index: int = IGNORE) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        keep = gt != ignore_index
        p, g = pred[keep].astype(np.int64), gt[keep].astype(np.int64)
        if p.size:
            if min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= self.k:
                raise ValueError(f"class id outside [0, {self.k})")
            self.counts += np.bincount(g * self.k + p, minlength=self.k * self.k).reshape(self.k, self.k)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise ValueError("class counts differ")
        return ConfusionMatrix(self.k, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def update(cm: ConfusionMatrix, pred, gt) -> ConfusionMatrix:
    return cm.update(pred, gt)


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class is absent from both GT and prediction."""
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    out = np.full(cm.k, np.nan)
    seen = union > 0
    out[seen] = tp[seen] / union[seen]
    return out


def miou(cm: ConfusionMatrix) -> float:
    iou = iou_per_class(cm)
    if np.all(np.isnan(iou)):
        raise ValueError("no class present in ground truth or prediction")
    return float(np.nanmean(iou))


def report(cm: ConfusionMatrix, class_names) -> dict:
    iou = iou_per_class(cm)
    return {
        "per_class": {name: float(v) for name, v in zip(class_names, iou) if not np.isnan(v)},
        "miou": miou(cm),
        "pixels_evaluated": cm.total,
    }
