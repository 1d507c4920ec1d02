"""Precision, recall and F1 for binary relation labels."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..errors import InputError

LABELS = ("Positive", "Negative")


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    macro: ClassMetrics
    accuracy: float
    confusion: dict[tuple[str, str], int]  # (true, predicted) -> count

    def rows(self) -> list[tuple[str, float, float, float, int]]:
        out = [(k, m.precision, m.recall, m.f1, m.support) for k, m in self.per_class.items()]
        out.append(("macro", self.macro.precision, self.macro.recall, self.macro.f1, self.macro.support))
        return out


def _label(x) -> str:
    value = getattr(x, "value", x)
    text = str(value).strip().capitalize()
    if text not in LABELS:
        raise InputError(f"label {x!r} is not Positive or Negative")
    return text


def _ratio(a: int, b: int) -> float:
    return a / b if b else 0.0


def classification_metrics(predicted: Sequence, true: Sequence) -> MetricsReport:
    """Per-class and macro precision/recall/F1 plus accuracy; 0/0 is reported as 0."""
    if len(predicted) != len(true):
        raise InputError("predicted and true labels differ in length")
    if not true:
        raise InputError("no labels")
    pred = [_label(p) for p in predicted]
    gold = [_label(t) for t in true]
    confusion = {(t, p): 0 for t in LABELS for p in LABELS}
    for t, p in zip(gold, pred):
        confusion[(t, p)] += 1
    per_class = {}
    for c in LABELS:
        tp = confusion[(c, c)]
        fp = sum(confusion[(t, c)] for t in LABELS if t != c)
        fn = sum(confusion[(c, p)] for p in LABELS if p != c)
        precision, recall = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        f1 = _ratio(2 * precision * recall, precision + recall) if precision + recall else 0.0
        per_class[c] = ClassMetrics(precision, recall, f1, tp + fn)
    k = len(LABELS)
    macro = ClassMetrics(
        sum(m.precision for m in per_class.values()) / k,
        sum(m.recall for m in per_class.values()) / k,
        sum(m.f1 for m in per_class.values()) / k,
        len(gold),
    )
    accuracy = sum(confusion[(c, c)] for c in LABELS) / len(gold)
    return MetricsReport(per_class, macro, accuracy, confusion)
