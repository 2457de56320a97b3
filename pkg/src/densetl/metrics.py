"""Confusion matrices and macro-averaged classification scores."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, cols: predicted class
    class_names: Optional[list[str]] = None

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_list(self) -> list[list[int]]:
        return self.counts.astype(int).tolist()


@dataclass
class MetricReport:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    correct_count: int
    total: int

    def to_dict(self) -> dict:
        return asdict(self)


def _indices(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D sequence of class indices")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must hold integer class indices")
    return arr.astype(np.int64)


def confusion(preds: Sequence[int], labels: Sequence[int], k: int,
              class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    p, t = _indices(preds, "preds"), _indices(labels, "labels")
    if p.shape != t.shape:
        raise ValueError(f"preds and labels differ in length ({p.size} vs {t.size})")
    if p.size and (min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= k):
        raise ValueError(f"class index outside [0, {k})")
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts, list(class_names) if class_names else None)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 -> 0 so absent classes do not poison the macro average
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def per_class(cm: ConfusionMatrix) -> dict[str, np.ndarray]:
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    precision = _safe_div(tp, c.sum(axis=0))
    recall = _safe_div(tp, c.sum(axis=1))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    return {"precision": precision, "recall": recall, "f1": f1}


def summarize(cm: ConfusionMatrix) -> MetricReport:
    total = cm.total
    if total == 0:
        raise ValueError("cannot summarize an empty confusion matrix")
    scores = per_class(cm)
    correct = int(np.trace(cm.counts))
    return MetricReport(
        accuracy=correct / total,
        precision_macro=float(scores["precision"].mean()),
        recall_macro=float(scores["recall"].mean()),
        f1_macro=float(scores["f1"].mean()),
        correct_count=correct,
        total=total,
    )


def correct_count(preds: Sequence[int], labels: Sequence[int]) -> int:
    p, t = _indices(preds, "preds"), _indices(labels, "labels")
    if p.shape != t.shape:
        raise ValueError(f"preds and labels differ in length ({p.size} vs {t.size})")
    return int((p == t).sum())


def percent(x: float) -> str:
    """Render a [0, 1] score as a percentage with one decimal."""
    return f"{100.0 * x:.1f}"
