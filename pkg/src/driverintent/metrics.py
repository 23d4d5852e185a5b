"""Evaluation metrics: accuracy, macro-F1, contradiction rate, anticipation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError
from .rules import ScenarioSet


def _check_lengths(preds, labels):
    if len(preds) == 0 or len(preds) != len(labels):
        raise ContractError(
            f"need equal, non-empty prediction/label lists "
            f"({len(preds)} vs {len(labels)})"
        )


def accuracy(preds: Sequence[int], labels: Sequence[int]) -> float:
    _check_lengths(preds, labels)
    return sum(int(p == y) for p, y in zip(preds, labels)) / len(preds)


def precision_recall(
    preds: Sequence[int], labels: Sequence[int], n_classes: int
) -> list[tuple[float, float]]:
    """Per-class (precision, recall), zero where undefined."""
    _check_lengths(preds, labels)
    out = []
    for c in range(n_classes):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        fp = sum(1 for p, y in zip(preds, labels) if p == c and y != c)
        fn = sum(1 for p, y in zip(preds, labels) if p != c and y == c)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        out.append((precision, recall))
    return out


def macro_f1(preds: Sequence[int], labels: Sequence[int], n_classes: int) -> float:
    """Unweighted mean of per-class F1; a class's F1 is 0 when P+R is 0."""
    scores = []
    for precision, recall in precision_recall(preds, labels, n_classes):
        denom = precision + recall
        scores.append(2.0 * precision * recall / denom if denom else 0.0)
    return float(np.mean(scores))


def contradiction_rate(
    preds: Sequence[int],
    contexts: Sequence[Sequence[int]],
    ruleset: ScenarioSet,
) -> float:
    """Fraction of predictions contradicted by their sample's context."""
    if len(preds) != len(contexts):
        raise ContractError(f"{len(preds)} predictions vs {len(contexts)} contexts")
    if not preds:
        return 0.0
    hits = sum(1 for p, c in zip(preds, contexts) if ruleset.contradicts(p, c))
    return hits / len(preds)


def anticipation_time(
    per_step_preds: Sequence[int], label: int, n_steps: int
) -> int | None:
    """Steps before the end from which predictions are correct and stay so.

    Returns ``n_steps - t*`` where t* is the earliest step such that every
    prediction from t* on equals the label; 0 when only the final step is
    right, and None (undefined, reported separately) when the final step
    is wrong.
    """
    if len(per_step_preds) != n_steps:
        raise ContractError(
            f"{len(per_step_preds)} step predictions for {n_steps} steps"
        )
    if per_step_preds[-1] != label:
        return None
    t_star = n_steps
    for t in range(n_steps, 0, -1):
        if per_step_preds[t - 1] != label:
            break
        t_star = t
    return n_steps - t_star


@dataclass
class FoldMetrics:
    accuracy: float
    macro_f1: float
    contradiction_rate: float
    per_class: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class MetricsReport:
    """Per-fold rows plus mean and sample standard deviation."""

    folds: list[FoldMetrics]
    class_names: tuple[str, ...] = ()

    def _stats(self, values: list[float]) -> tuple[float, float]:
        arr = np.asarray(values)
        sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        return float(arr.mean()), sd

    @property
    def accuracy(self) -> tuple[float, float]:
        return self._stats([f.accuracy for f in self.folds])

    @property
    def macro_f1(self) -> tuple[float, float]:
        return self._stats([f.macro_f1 for f in self.folds])

    @property
    def contradiction_rate(self) -> tuple[float, float]:
        return self._stats([f.contradiction_rate for f in self.folds])

    def __str__(self) -> str:
        lines = ["fold  accuracy  macro_f1  contradiction_rate"]
        for i, f in enumerate(self.folds):
            lines.append(f"{i:4d}  {f.accuracy:.6f}  {f.macro_f1:.6f}  "
                         f"{f.contradiction_rate:.6f}")
        acc, f1, cr = self.accuracy, self.macro_f1, self.contradiction_rate
        lines.append(f" avg  {acc[0]:.6f} ± {acc[1]:.6f}  {f1[0]:.6f} ± {f1[1]:.6f}  "
                     f"{cr[0]:.6f} ± {cr[1]:.6f}")
        if self.folds and self.folds[0].per_class and self.class_names:
            lines.append("per-class precision/recall (last fold):")
            for name, (precision, recall) in zip(self.class_names,
                                                 self.folds[-1].per_class):
                lines.append(f"  {name}: P={precision:.6f} R={recall:.6f}")
        return "\n".join(lines)
