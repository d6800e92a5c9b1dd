"""Pixel confusion matrix and the three segmentation metrics
(pixel accuracy, mean class accuracy, mean IoU)."""

from __future__ import annotations

import json

import numpy as np

from .errors import DataError, MetricError


class ConfusionMatrix:
    """counts[i, j] = pixels with ground truth i predicted as j."""

    def __init__(self, num_classes: int):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: np.ndarray, gt: np.ndarray, ignore_label: int = 255):
        if pred.shape != gt.shape:
            raise DataError(f"pred {pred.shape} vs gt {gt.shape}")
        valid = gt != ignore_label
        p = pred[valid].astype(np.int64)
        g = gt[valid].astype(np.int64)
        n = self.num_classes
        if p.size and (p.min() < 0 or p.max() >= n or g.min() < 0 or g.max() >= n):
            raise DataError("class id outside [0, num_classes)")
        self.counts += np.bincount(g * n + p, minlength=n * n).reshape(n, n)
        return self

    def merge(self, other: "ConfusionMatrix"):
        self.counts += other.counts
        return self

    def compute(self) -> dict:
        """Acc / mAcc / mIoU per the usual confusion-matrix identities.

        Classes absent from both ground truth and predictions are
        excluded from the mAcc / mIoU means (the divisor shrinks).
        """
        c = self.counts.astype(np.float64)
        g_i = c.sum(axis=1)
        pred_i = c.sum(axis=0)
        total = c.sum()
        if total == 0:
            raise MetricError("empty confusion matrix")
        diag = np.diag(c)
        present = (g_i > 0) | (pred_i > 0)
        acc = float(diag.sum() / total)
        with np.errstate(divide="ignore", invalid="ignore"):
            recall = np.where(g_i > 0, diag / np.maximum(g_i, 1), 0.0)
            union = g_i + pred_i - diag
            iou = np.where(union > 0, diag / np.maximum(union, 1), 0.0)
        n_present = int(present.sum())
        macc = float(recall[present].sum() / n_present)
        miou = float(iou[present].sum() / n_present)
        return {
            "acc": acc,
            "macc": macc,
            "miou": miou,
            "per_class_iou": [float(v) if present[i] else None
                              for i, v in enumerate(iou)],
        }

    def write_json(self, path) -> dict:
        m = self.compute()
        out = {
            "acc": round(m["acc"], 6),
            "macc": round(m["macc"], 6),
            "miou": round(m["miou"], 6),
            "per_class": [None if v is None else round(v, 6)
                          for v in m["per_class_iou"]],
        }
        with open(path, "w") as fh:
            json.dump(out, fh, indent=2)
            fh.write("\n")
        return m
