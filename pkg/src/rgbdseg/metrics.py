"""Pixel confusion counts and intersection-over-union."""

from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    """``matrix[gt, pred]`` pixel counts."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.matrix = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred = np.asarray(pred).reshape(-1).astype(np.int64)
        gt = np.asarray(gt).reshape(-1).astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction and label counts differ: {pred.size} vs {gt.size}")
        k = self.num_classes
        if pred.size and (min(pred.min(), gt.min()) < 0 or max(pred.max(), gt.max()) >= k):
            raise ValueError(f"class ids must lie in [0, {k})")
        self.matrix += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("class counts differ")
        out = ConfusionMatrix(self.num_classes)
        out.matrix = self.matrix + other.matrix
        return out

    @property
    def tp(self) -> np.ndarray:
        return np.diag(self.matrix).copy()

    @property
    def fp(self) -> np.ndarray:
        return self.matrix.sum(axis=0) - self.tp

    @property
    def fn(self) -> np.ndarray:
        return self.matrix.sum(axis=1) - self.tp

    @property
    def total(self) -> int:
        return int(self.matrix.sum())

    def iou(self, cls: int) -> float | None:
        return iou(self, cls)

    def ious(self) -> list[float | None]:
        return [iou(self, c) for c in range(self.num_classes)]

    def miou(self) -> float | None:
        return miou(self)


def iou(conf: ConfusionMatrix, cls: int) -> float | None:
    """TP / (TP + FP + FN); ``None`` when the class never occurs in prediction or label."""
    if not 0 <= cls < conf.num_classes:
        raise IndexError(f"class {cls} out of range")
    tp = int(conf.tp[cls])
    denom = tp + int(conf.fp[cls]) + int(conf.fn[cls])
    return None if denom == 0 else tp / denom


def miou(conf: ConfusionMatrix) -> float | None:
    vals = [v for v in conf.ious() if v is not None]
    return float(np.mean(vals)) if vals else None
