"""Confusion matrices and the grading metrics: per-class/macro precision,
recall and F1, accuracy, and quadratic weighted kappa."""

from __future__ import annotations

import csv
import json
import os
import warnings
from dataclasses import dataclass, field
from typing import Iterable, List, Sequence

import numpy as np


class ConfusionMatrix:
    """Counts ``O[i, j]``: samples of actual class ``i`` classified as ``j``."""

    def __init__(self, num_classes: int = 5, counts=None):
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts)
        if counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("confusion matrix counts must be non-negative")
        if not np.all(np.equal(np.mod(counts, 1), 0)):
            raise ValueError("confusion matrix counts must be integers")
        self.counts = counts.astype(np.int64)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, actual: int, predicted: int) -> "ConfusionMatrix":
        n = self.num_classes
        if not (0 <= actual < n and 0 <= predicted < n):
            raise ValueError(f"labels ({actual}, {predicted}) outside [0, {n})")
        self.counts[actual, predicted] += 1
        return self

    def update(self, actual: Iterable[int], predicted: Iterable[int]) -> "ConfusionMatrix":
        for a, p in zip(actual, predicted):
            self.accumulate(int(a), int(p))
        return self

    @classmethod
    def from_labels(cls, actual: Sequence[int], predicted: Sequence[int], num_classes: int = 5) -> "ConfusionMatrix":
        return cls(num_classes).update(actual, predicted)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.num_classes != other.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(counts=self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()})"

    @classmethod
    def from_csv(cls, path: os.PathLike) -> "ConfusionMatrix":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].lstrip().startswith("#")]
        try:
            counts = [[int(v) for v in row] for row in rows]
        except ValueError as exc:
            raise ValueError(f"{path}: confusion matrix CSV must hold integers only ({exc})") from None
        return cls(counts=np.array(counts))

    def to_csv(self, path: os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerows(self.counts.tolist())


def accumulate(cm: ConfusionMatrix, actual: int, predicted: int) -> ConfusionMatrix:
    return cm.accumulate(actual, predicted)


def _require_counts(cm: ConfusionMatrix) -> np.ndarray:
    if cm.total < 1:
        raise ValueError("metrics need a confusion matrix with at least one count")
    return cm.counts.astype(np.float64)


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


@dataclass
class PrecisionRecallF1:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray

    @property
    def macro_precision(self) -> float:
        return float(self.precision.mean())

    @property
    def macro_recall(self) -> float:
        return float(self.recall.mean())

    @property
    def macro_f1(self) -> float:
        return float(self.f1.mean())

    @property
    def macro_f1_harmonic(self) -> float:
        """Harmonic mean of macro precision and macro recall, the other F1
        convention found in published grading reports."""
        p, r = self.macro_precision, self.macro_recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def precision_recall_f1(cm: ConfusionMatrix) -> PrecisionRecallF1:
    """One-vs-rest scores per class; empty denominators score 0."""
    o = _require_counts(cm)
    tp = np.diag(o)
    fp = o.sum(axis=0) - tp
    fn = o.sum(axis=1) - tp
    precision = _safe_ratio(tp, tp + fp)
    recall = _safe_ratio(tp, tp + fn)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    return PrecisionRecallF1(precision, recall, f1)


def accuracy(cm: ConfusionMatrix) -> float:
    o = _require_counts(cm)
    return float(np.trace(o) / o.sum())


def quadratic_weights(n: int) -> np.ndarray:
    i, j = np.indices((n, n))
    return (i - j) ** 2 / float((n - 1) ** 2)


def weighted_kappa(cm: ConfusionMatrix) -> float:
    """Quadratic weighted kappa with chance counts from the marginals,
    ``E[i, j] = rows[i] * cols[j] / total``.

    Returns 0 (with a warning) when the expected disagreement vanishes.
    """
    o = _require_counts(cm)
    n = o.shape[0]
    w = quadratic_weights(n)
    expected = np.outer(o.sum(axis=1), o.sum(axis=0)) / o.sum()
    denom = float((w * expected).sum())
    if denom == 0.0:
        warnings.warn("weighted kappa undefined: expected weighted disagreement is zero", RuntimeWarning)
        return 0.0
    return 1.0 - float((w * o).sum()) / denom


@dataclass
class MetricsReport:
    precision: List[float]
    recall: List[float]
    f1: List[float]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    accuracy: float
    wks: float
    total: int = 0
    class_names: List[str] = field(default_factory=list)

    def format_table(self) -> str:
        names = self.class_names or [f"class {i}" for i in range(len(self.precision))]
        width = max(len(n) for n in names + ["macro"])
        lines = [f"{'':{width}}  precision  recall     f1"]
        for name, p, r, f in zip(names, self.precision, self.recall, self.f1):
            lines.append(f"{name:{width}}  {p:9.4f}  {r:6.4f}  {f:6.4f}")
        lines.append(f"{'macro':{width}}  {self.macro_precision:9.4f}  {self.macro_recall:6.4f}  {self.macro_f1:6.4f}")
        lines.append(f"accuracy  {self.accuracy:.4f}")
        lines.append(f"wks       {self.wks:.4f}")
        lines.append(f"samples   {self.total}")
        return "\n".join(lines)

    def json_lines(self) -> List[str]:
        records = []
        for c, (p, r, f) in enumerate(zip(self.precision, self.recall, self.f1)):
            records.append({"metric": "precision", "class": c, "value": p})
            records.append({"metric": "recall", "class": c, "value": r})
            records.append({"metric": "f1", "class": c, "value": f})
        for name in ("macro_precision", "macro_recall", "macro_f1", "accuracy", "wks"):
            records.append({"metric": name, "value": getattr(self, name)})
        return [json.dumps(r, sort_keys=True) for r in records]


def report(cm: ConfusionMatrix, class_names: Sequence[str] = ()) -> MetricsReport:
    prf = precision_recall_f1(cm)
    return MetricsReport(
        precision=prf.precision.tolist(),
        recall=prf.recall.tolist(),
        f1=prf.f1.tolist(),
        macro_precision=prf.macro_precision,
        macro_recall=prf.macro_recall,
        macro_f1=prf.macro_f1,
        accuracy=accuracy(cm),
        wks=weighted_kappa(cm),
        total=cm.total,
        class_names=list(class_names),
    )
