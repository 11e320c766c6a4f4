"""Evaluation metrics and the exact ground-truth oracle.

Every reported error in the benchmark derives from GroundTruth, a plain
hash map of exact per-flow totals maintained independently of all
sketches.
"""

import math
from collections import Counter


class UndefinedMetricError(ValueError):
    """Relative error against a zero ground truth is undefined."""


def relative_error(truth: float, estimate: float) -> float:
    """|truth - estimate| / truth. Raises for truth == 0; callers
    exclude such flows from aggregates."""
    if truth <= 0:
        raise UndefinedMetricError(f"relative error undefined for truth={truth}")
    return abs(truth - estimate) / truth


def f1_score(true_set: set, predicted_set: set) -> float:
    """Harmonic mean of precision and recall; 0 whenever P + R == 0
    (including the degenerate case of two empty sets)."""
    tp = len(true_set & predicted_set)
    precision = tp / len(predicted_set) if predicted_set else 0.0
    recall = tp / len(true_set) if true_set else 0.0
    if precision + recall == 0.0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def precision_recall(true_set: set, predicted_set: set) -> tuple[float, float]:
    tp = len(true_set & predicted_set)
    precision = tp / len(predicted_set) if predicted_set else 0.0
    recall = tp / len(true_set) if true_set else 0.0
    return precision, recall


def entropy_of_values(values) -> float:
    """Base-2 entropy of the frequency distribution of the given values."""
    values = list(values)
    if not values:
        raise UndefinedMetricError("entropy of an empty collection is undefined")
    counts = Counter(values)
    n = len(values)
    return -sum((c / n) * math.log2(c / n) for c in counts.values())


class GroundTruth:
    """Exact per-flow totals accumulated in a dict."""

    def __init__(self):
        self.totals: dict[bytes, int] = {}

    def add(self, key: bytes, value: int) -> None:
        self.totals[key] = self.totals.get(key, 0) + value

    def keys(self) -> list[bytes]:
        return list(self.totals.keys())

    def cardinality(self) -> int:
        return len(self.totals)

    def total(self, key: bytes) -> int:
        return self.totals[key]

    def entropy(self) -> float:
        return entropy_of_values(self.totals.values())

    def heavy_hitters(self, threshold: float) -> set[bytes]:
        return {k for k, v in self.totals.items() if v > threshold}
