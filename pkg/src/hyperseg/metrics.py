"""Confusion matrices and the derived segmentation scores."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

REPORT_COLUMNS = ("experiment", "bands", "backbone", "decoder", "precision", "recall", "f1", "accuracy", "miou")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @classmethod
    def empty(cls, class_names: Sequence[str]) -> "ConfusionMatrix":
        n = len(class_names)
        return cls(np.zeros((n, n), dtype=np.int64), tuple(class_names))

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.class_names != other.class_names:
            raise ValueError("cannot add confusion matrices over different classes")
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ConfusionMatrix)
            and self.class_names == other.class_names
            and np.array_equal(self.counts, other.counts)
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["truth\\pred", *self.class_names])
        for name, row in zip(self.class_names, self.counts):
            writer.writerow([name, *map(int, row)])
        return buf.getvalue()


def accumulate(cm: ConfusionMatrix, predicted, truth) -> ConfusionMatrix:
    """Return ``cm`` plus the per-pixel tally of ``(truth, predicted)`` pairs."""
    p = np.asarray(getattr(predicted, "labels", predicted), dtype=np.int64)
    t = np.asarray(getattr(truth, "labels", truth), dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError(f"predicted mask {p.shape} and truth mask {t.shape} differ in size")
    p, t = p.ravel(), t.ravel()
    c = cm.num_classes
    for name, arr in (("predicted", p), ("truth", t)):
        if arr.size and (arr.min() < 0 or arr.max() >= c):
            raise ValueError(f"{name} mask holds a class index outside 0..{c - 1}")
    tally = np.bincount(t * c + p, minlength=c * c).reshape(c, c)
    return ConfusionMatrix(cm.counts + tally, cm.class_names)


@dataclass(frozen=True)
class MetricReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    miou: float
    per_class_iou: tuple[float, ...]
    included: tuple[bool, ...]


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(num.shape, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute(cm: ConfusionMatrix, include_background: bool = False) -> MetricReport:
    """Macro-averaged precision, recall, F1 and mIoU plus overall accuracy.

    A class takes part in the macro averages when it appears in the truth or
    the prediction; class 0 is left out unless ``include_background``.
    Accuracy always covers every pixel.
    """
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp

    iou = _ratio(tp, tp + fp + fn)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)

    included = (tp + fp + fn) > 0
    if not include_background:
        included[0] = False
    if not included.any():
        raise ValueError("no class left to average over")

    def macro(v):
        return float(v[included].mean())

    return MetricReport(
        precision=macro(precision),
        recall=macro(recall),
        f1=macro(f1),
        accuracy=float(tp.sum() / total),
        miou=macro(iou),
        per_class_iou=tuple(float(v) for v in iou),
        included=tuple(bool(v) for v in included),
    )


def report_row(experiment: str, bands: int, backbone: str, decoder: str, report: MetricReport) -> list[str]:
    scores = (report.precision, report.recall, report.f1, report.accuracy, report.miou)
    return [experiment, str(bands), backbone, decoder, *(f"{v:.6f}" for v in scores)]


def report_csv(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    writer.writerows(rows)
    return buf.getvalue()
