"""Pixel-level detection metrics and ROC sweeps.

IoU pools true/false counts over the whole evaluation set; nIoU averages
per-sample IoU.  Detection probability is TP/(TP+FN) and false-alarm rate
FP/(FP+TN), both over pixels.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

# Sentinels bracketing the ROC: above any probability, and at/below zero.
ROC_THRESHOLD_HIGH = 2.0
ROC_THRESHOLD_LOW = 0.0


@dataclass
class MetricReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    iou: float = 0.0
    niou: float = 0.0
    pd: float = 0.0
    fa: float = 0.0
    sample_ious: list = field(default_factory=list)
    roc_points: list = field(default_factory=list)

    def lines(self) -> list[str]:
        return [
            f"iou: {self.iou:.6f}",
            f"niou: {self.niou:.6f}",
            f"pd: {self.pd:.6f}",
            f"fa: {self.fa:.6f}",
            f"tp: {self.tp}",
            f"fp: {self.fp}",
            f"fn: {self.fn}",
            f"tn: {self.tn}",
        ]


def _ratio(num: int, den: int, empty_value: float = 0.0) -> float:
    return num / den if den else empty_value


def _counts(pred: np.ndarray, gt: np.ndarray):
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = int(np.count_nonzero(~pred & ~gt))
    return tp, fp, fn, tn


def _predictions(model, dataset, threshold: float):
    """Yield boolean (prediction, ground-truth) pairs, one per sample."""
    for image, mask in dataset:
        x = Tensor(image.reshape((1,) + image.shape))
        probs = model.predict(x).data[0]
        yield probs >= threshold, mask.astype(bool)


def report_from_pairs(pairs) -> MetricReport:
    rep = MetricReport()
    for pred, gt in pairs:
        tp, fp, fn, tn = _counts(pred, gt)
        rep.tp += tp
        rep.fp += fp
        rep.fn += fn
        rep.tn += tn
        union = tp + fp + fn
        rep.sample_ious.append(_ratio(tp, union, empty_value=1.0))
    union = rep.tp + rep.fp + rep.fn
    rep.iou = _ratio(rep.tp, union, empty_value=1.0)
    rep.niou = float(np.mean(rep.sample_ious)) if rep.sample_ious else 0.0
    rep.pd = _ratio(rep.tp, rep.tp + rep.fn)
    rep.fa = _ratio(rep.fp, rep.fp + rep.tn)
    return rep


def evaluate(model, dataset, threshold: float = 0.5) -> MetricReport:
    return report_from_pairs(_predictions(model, dataset, threshold))


def roc_sweep(model, dataset, thresholds) -> list[tuple]:
    """(threshold, Fa, Pd) per threshold, descending, with forced endpoints
    at a threshold above 1 (nothing predicted) and at 0 (everything)."""
    thresholds = list(thresholds)
    if any(t1 < t2 for t1, t2 in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted descending")
    full = [ROC_THRESHOLD_HIGH] + thresholds + [ROC_THRESHOLD_LOW]

    # One forward pass per sample; counts for all thresholds from the
    # cached probability maps.
    probs_and_gt = []
    for image, mask in dataset:
        x = Tensor(image.reshape((1,) + image.shape))
        probs_and_gt.append((model.predict(x).data[0], mask.astype(bool)))

    points = []
    for t in full:
        tp = fp = fn = tn = 0
        for probs, gt in probs_and_gt:
            dtp, dfp, dfn, dtn = _counts(probs >= t, gt)
            tp += dtp
            fp += dfp
            fn += dfn
            tn += dtn
        points.append((t, _ratio(fp, fp + tn), _ratio(tp, tp + fn)))
    return points


def write_report(path: str, rep: MetricReport):
    with open(path, "w") as fh:
        fh.write("\n".join(rep.lines()) + "\n")


def write_roc_csv(path: str, points):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fa", "pd"])
        for t, fa, pd in points:
            writer.writerow([f"{t:.6f}", f"{fa:.8f}", f"{pd:.8f}"])
