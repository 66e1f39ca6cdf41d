"""Confusion matrix and macro-averaged classification metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AVERAGING = "macro"


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    n_samples: int

    def to_dict(self, categories=None) -> dict:
        names = list(categories) if categories is not None else [str(i) for i in range(len(self.f1))]
        return {
            "averaging": AVERAGING,
            "n_samples": self.n_samples,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "per_class": {
                name: {"precision": float(p), "recall": float(r), "f1": float(f)}
                for name, p, r, f in zip(names, self.precision, self.recall, self.f1)
            },
            "confusion": self.confusion.tolist(),
        }

    def rows(self, categories=None) -> list[dict]:
        """One row per class plus a macro row, for CSV output."""
        names = list(categories) if categories is not None else [str(i) for i in range(len(self.f1))]
        support = self.confusion.sum(axis=1)
        out = [{"category": n, "precision": float(p), "recall": float(r), "f1": float(f),
                "support": int(s)}
               for n, p, r, f, s in zip(names, self.precision, self.recall, self.f1, support)]
        out.append({"category": "macro", "precision": self.macro_precision,
                    "recall": self.macro_recall, "f1": self.macro_f1, "support": self.n_samples})
        return out


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.shape[0]} predictions for {labels.shape[0]} labels")
    for arr, what in ((preds, "prediction"), (labels, "label")):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise IndexError(f"{what} outside [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts


def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # 0/0 is reported as 0
    return np.divide(num, den, out=np.zeros(num.shape), where=den > 0)


def compute_metrics(confusion) -> MetricsReport:
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix has negative counts")
    n = int(cm.sum())
    if n == 0:
        raise ValueError("confusion matrix is all zeros")
    tp = np.diag(cm).astype(np.float64)
    precision = _ratio(tp, cm.sum(axis=0).astype(np.float64))
    recall = _ratio(tp, cm.sum(axis=1).astype(np.float64))
    f1 = _ratio(2 * precision * recall, precision + recall)
    return MetricsReport(
        confusion=cm.astype(np.int64), accuracy=float(tp.sum() / n),
        precision=precision, recall=recall, f1=f1,
        macro_precision=float(precision.mean()), macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()), n_samples=n,
    )
