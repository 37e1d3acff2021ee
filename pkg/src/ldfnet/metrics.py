"""Confusion-matrix accumulation and IoU / pixel-accuracy computation."""

from __future__ import annotations

import numpy as np

from .errors import DataError

IGNORE_INDEX = 255


class ConfusionMatrix:
    """K x K integer counts of (ground truth, prediction) pairs.

    Ignored pixels never enter the counts; accumulation is order-independent
    and matrices merge by element-wise addition.
    """

    def __init__(self, num_classes, ignore_index=IGNORE_INDEX):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, predictions, labels):
        predictions = np.asarray(predictions).reshape(-1)
        labels = np.asarray(labels).reshape(-1)
        if predictions.shape != labels.shape:
            raise DataError(
                "prediction count %d != label count %d"
                % (predictions.size, labels.size))
        keep = labels != self.ignore_index
        preds = predictions[keep]
        gts = labels[keep]
        if preds.size == 0:
            return self
        if preds.min() < 0 or preds.max() >= self.num_classes:
            raise DataError(
                "prediction value %d outside 0..%d"
                % (int(preds[(preds < 0) | (preds >= self.num_classes)][0]),
                   self.num_classes - 1))
        if gts.min() < 0 or gts.max() >= self.num_classes:
            raise DataError(
                "label value %d outside 0..%d and not ignore"
                % (int(gts[(gts < 0) | (gts >= self.num_classes)][0]),
                   self.num_classes - 1))
        flat = gts.astype(np.int64) * self.num_classes + preds.astype(np.int64)
        self.counts += np.bincount(
            flat, minlength=self.num_classes ** 2).reshape(self.counts.shape)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self

    def reset(self):
        self.counts.fill(0)

    def total(self):
        return int(self.counts.sum())

    def pixel_accuracy(self):
        total = self.total()
        if total == 0:
            raise DataError("empty confusion matrix")
        return float(np.diag(self.counts).sum() / total)

    def iou(self, absent_as_zero=False):
        """Per-class IoU list and the mean.

        Classes absent from both prediction and ground truth are excluded
        from the mean (and reported as None) unless ``absent_as_zero``.
        """
        if self.total() == 0:
            raise DataError("empty confusion matrix")
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        union = tp + fp + fn
        per_class = []
        included = []
        for k in range(self.num_classes):
            if union[k] == 0:
                if absent_as_zero:
                    per_class.append(0.0)
                    included.append(0.0)
                else:
                    per_class.append(None)
            else:
                value = float(tp[k] / union[k])
                per_class.append(value)
                included.append(value)
        if not included:
            raise DataError("every class absent from both prediction and truth")
        return per_class, float(np.mean(included))


def miou(cm, absent_as_zero=False):
    per_class, mean = cm.iou(absent_as_zero=absent_as_zero)
    return mean, per_class


def metrics_records(cm):
    """Line-record form of the evaluation report (key=value pairs)."""
    per_class, mean = cm.iou()
    rows = {}
    for k, v in enumerate(per_class):
        rows["class_%d_iou" % k] = "absent" if v is None else "%.6f" % v
    rows["miou"] = "%.6f" % mean
    rows["pixel_accuracy"] = "%.6f" % cm.pixel_accuracy()
    rows["evaluated_pixels"] = str(cm.total())
    return rows


def metrics_table(cm, class_names=None):
    """Aligned text table of the evaluation report."""
    per_class, mean = cm.iou()
    names = class_names or ["class_%d" % k for k in range(cm.num_classes)]
    width = max(len(n) for n in names) + 2
    lines = ["%-*s %s" % (width, "class", "iou")]
    for name, v in zip(names, per_class):
        lines.append("%-*s %s" % (width, name, "absent" if v is None else "%.4f" % v))
    lines.append("%-*s %.4f" % (width, "mean_iou", mean))
    lines.append("%-*s %.4f" % (width, "pixel_accuracy", cm.pixel_accuracy()))
    return "\n".join(lines)
