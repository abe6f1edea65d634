"""Confusion-matrix metrics: accuracy plus macro and weighted P/R/F1."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ContractError


def confuse(preds, labels, num_classes: int) -> np.ndarray:
    """``cm[true, pred]`` counts as an int64 ``K x K`` array."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.shape != labels.shape:
        raise ContractError(f"{preds.size} predictions vs {labels.size} labels")
    for arr, what in ((preds, "prediction"), (labels, "label")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"{what} outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def merge(*matrices: np.ndarray) -> np.ndarray:
    return np.sum(matrices, axis=0)


@dataclass
class MetricsReport:
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float

    def summary(self) -> dict[str, float]:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "weighted_precision": self.weighted_precision,
            "macro_recall": self.macro_recall,
            "weighted_recall": self.weighted_recall,
            "macro_f1": self.macro_f1,
            "weighted_f1": self.weighted_f1,
        }


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(int(num), int(den)) if den > 0 else Fraction(0)


def report(cm: np.ndarray) -> MetricsReport:
    """Per-class and averaged metrics; empty denominators yield 0.

    Averages are formed in exact rational arithmetic and rounded once, so
    weighted recall and accuracy come out as the same float.
    """
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.sum() <= 0:
        raise ContractError("report needs a square confusion matrix with at least one sample")
    k = cm.shape[0]
    tp = [int(cm[i, i]) for i in range(k)]
    predicted = [int(v) for v in cm.sum(axis=0)]
    support = [int(v) for v in cm.sum(axis=1)]
    total = sum(support)
    precision = [_ratio(tp[i], predicted[i]) for i in range(k)]
    recall = [_ratio(tp[i], support[i]) for i in range(k)]
    f1 = [2 * p * r / (p + r) if p + r > 0 else Fraction(0) for p, r in zip(precision, recall)]

    def macro(values):
        return float(sum(values, Fraction(0)) / k)

    def weighted(values):
        return float(sum((s * v for s, v in zip(support, values)), Fraction(0)) / total)

    return MetricsReport(
        accuracy=float(Fraction(sum(tp), total)),
        precision=np.array([float(v) for v in precision]),
        recall=np.array([float(v) for v in recall]),
        f1=np.array([float(v) for v in f1]),
        support=np.array(support, dtype=np.int64),
        macro_precision=macro(precision),
        macro_recall=macro(recall),
        macro_f1=macro(f1),
        weighted_precision=weighted(precision),
        weighted_recall=weighted(recall),
        weighted_f1=weighted(f1),
    )


def render_table(rep: MetricsReport, class_names: Sequence[str] | None = None) -> str:
    """Aligned text; summary columns match the usual results-table layout
    (percentages for accuracy/precision/recall, 4-decimal F1)."""
    names = list(class_names) if class_names is not None else [str(i) for i in range(len(rep.support))]
    width = max(12, *(len(n) for n in names))
    lines = [f"{'class':<{width}}  {'precision':>9}  {'recall':>9}  {'f1':>7}  {'support':>7}"]
    for i, name in enumerate(names):
        lines.append(f"{name:<{width}}  {rep.precision[i]:>9.4f}  {rep.recall[i]:>9.4f}  "
                     f"{rep.f1[i]:>7.4f}  {int(rep.support[i]):>7d}")
    lines.append("")
    head = ["Accuracy(%)", "Macro P(%)", "Weighted P(%)", "Macro R(%)", "Weighted R(%)", "Macro F1", "Weighted F1"]
    vals = [
        f"{100 * rep.accuracy:.2f}",
        f"{100 * rep.macro_precision:.2f}",
        f"{100 * rep.weighted_precision:.2f}",
        f"{100 * rep.macro_recall:.2f}",
        f"{100 * rep.weighted_recall:.2f}",
        f"{rep.macro_f1:.4f}",
        f"{rep.weighted_f1:.4f}",
    ]
    lines.append("  ".join(f"{h:>13}" for h in head))
    lines.append("  ".join(f"{v:>13}" for v in vals))
    return "\n".join(lines) + "\n"


def render_kv(rep: MetricsReport) -> str:
    lines = [f"{k}={v!r}" for k, v in rep.summary().items()]
    for i in range(len(rep.support)):
        lines += [
            f"class{i}.precision={float(rep.precision[i])!r}",
            f"class{i}.recall={float(rep.recall[i])!r}",
            f"class{i}.f1={float(rep.f1[i])!r}",
            f"class{i}.support={int(rep.support[i])}",
        ]
    return "\n".join(lines) + "\n"
