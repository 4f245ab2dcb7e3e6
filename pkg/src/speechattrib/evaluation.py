"""Confusion matrix, accuracy, macro precision/recall/F1 and the two-part weighted score."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

N_CLASSES = 6
PART_WEIGHTS = (0.7, 0.3)


@dataclass(frozen=True)
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def as_dict(self) -> dict:
        return {
            "n": self.total,
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
        }

    def to_text(self, prefix: str = "") -> str:
        return "".join(f"{prefix}{k}: {v!r}\n" for k, v in self.as_dict().items())


def confusion_matrix(preds, truths, n_classes: int = N_CLASSES) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    truths = np.asarray(truths, dtype=np.int64)
    if preds.shape != truths.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {truths.shape}")
    for name, ids in (("prediction", preds), ("truth", truths)):
        if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
            raise ValueError(f"{name} class id outside 0..{n_classes - 1}")
    return np.bincount(truths * n_classes + preds, minlength=n_classes ** 2).reshape(n_classes, n_classes)


def metrics(cm) -> MetricsReport:
    """Macro scores average over classes that occur in the truth (non-zero rows)."""
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ValueError("confusion matrix has negative counts")
    total = cm.sum()
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    rows = cm.sum(axis=1).astype(np.float64)
    cols = cm.sum(axis=0).astype(np.float64)
    precision = np.divide(tp, cols, out=np.zeros_like(tp), where=cols > 0)
    recall = np.divide(tp, rows, out=np.zeros_like(tp), where=rows > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    present = rows > 0
    return MetricsReport(
        confusion=cm,
        accuracy=float(tp.sum() / total),
        macro_precision=float(precision[present].mean()),
        macro_recall=float(recall[present].mean()),
        macro_f1=float(f1[present].mean()),
    )


def evaluate(preds, truths, n_classes: int = N_CLASSES) -> MetricsReport:
    return metrics(confusion_matrix(preds, truths, n_classes))


def weighted_eval(part1_score: float, part2_score: float, weights=PART_WEIGHTS) -> float:
    for s in (part1_score, part2_score):
        if not (0.0 <= s <= 1.0):
            raise ValueError(f"scores must lie in [0, 1], got {s}")
    return weights[0] * part1_score + weights[1] * part2_score


def write_confusion_csv(cm, path) -> None:
    cm = np.asarray(cm)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + [str(k) for k in range(cm.shape[1])])
        for k, row in enumerate(cm):
            w.writerow([str(k)] + [str(int(v)) for v in row])


def parse_report(text: str) -> dict:
    """Inverse of the key: value text format used by MetricsReport.to_text."""
    out = {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = line.partition(":")
        value = value.strip()
        try:
            out[key.strip()] = int(value)
        except ValueError:
            try:
                out[key.strip()] = float(value)
            except ValueError:
                out[key.strip()] = value
    return out
