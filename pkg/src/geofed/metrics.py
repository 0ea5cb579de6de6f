"""Confusion counting and the local / global mIoU summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .synthdata import IGNORE


@dataclass(frozen=True)
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, num_classes: int) -> "ConfusionCounts":
        return cls(np.zeros(num_classes), np.zeros(num_classes), np.zeros(num_classes))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    @property
    def num_classes(self) -> int:
        return self.tp.size


def accumulate(pred, true, num_classes: int, ignore=(IGNORE,),
               counts: ConfusionCounts | None = None) -> ConfusionCounts:
    """Add TP/FP/FN of one prediction to ``counts``; ignored true pixels are dropped."""
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"accumulate: shape mismatch {pred.shape} vs {true.shape}")
    keep = ~np.isin(true, list(ignore)) if ignore else np.ones(true.shape, bool)
    p = pred[keep].astype(np.int64)
    t = true[keep].astype(np.int64)
    conf = np.bincount(t * num_classes + p, minlength=num_classes ** 2)
    conf = conf.reshape(num_classes, num_classes)  # rows true, cols pred
    tp = np.diag(conf).astype(np.float64)
    new = ConfusionCounts(tp, conf.sum(axis=0) - tp, conf.sum(axis=1) - tp)
    return new if counts is None else counts + new


def iou_per_class(counts: ConfusionCounts) -> np.ndarray:
    """IoU per category; NaN where TP + FP + FN is zero."""
    denom = counts.tp + counts.fp + counts.fn
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, counts.tp / np.where(denom > 0, denom, 1), np.nan)


def miou(counts: ConfusionCounts) -> float:
    """Mean IoU over categories that occur in prediction or truth."""
    iou = iou_per_class(counts)
    if np.all(np.isnan(iou)):
        raise ValueError("miou: every category is empty")
    return float(np.nanmean(iou))


def local_metric(per_institution) -> float:
    """Unweighted mean of per-institution mIoU."""
    per_institution = list(per_institution)
    if not per_institution:
        raise ValueError("local_metric: no institutions")
    return float(np.mean([miou(c) for c in per_institution]))


def global_metric(per_institution) -> float:
    """mIoU of the confusion counts pooled over institutions."""
    per_institution = list(per_institution)
    if not per_institution:
        raise ValueError("global_metric: no institutions")
    pooled = per_institution[0]
    for c in per_institution[1:]:
        pooled = pooled + c
    return miou(pooled)
