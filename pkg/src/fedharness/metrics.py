"""Per-class precision/recall/F1 and micro, macro and weighted aggregates."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    accuracy: float
    micro_f1: float
    macro_f1: float
    weighted_f1: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(**d)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # undefined ratios (0/0) count as 0
    out = np.zeros_like(num, dtype=np.float64)
    np.divide(num, den, out=out, where=den > 0)
    return out


def compute(confusion) -> MetricsReport:
    """Metrics from ``confusion[true, pred]`` counts."""
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise MetricsError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise MetricsError("confusion matrix has negative counts")
    total = cm.sum()
    if total <= 0:
        raise MetricsError("confusion matrix is all zeros")
    cm = cm.astype(np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = _safe_div(tp, predicted)
    recall = _safe_div(tp, actual)
    f1 = _safe_div(2 * precision * recall, precision + recall)
    accuracy = float(tp.sum() / total)
    # single-label multiclass: micro-averaged F1 is exactly the accuracy
    micro_f1 = accuracy
    macro_f1 = float(f1.mean())
    weighted_f1 = float((f1 * actual).sum() / actual.sum())
    return MetricsReport(
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        support=[int(v) for v in actual],
        accuracy=accuracy,
        micro_f1=micro_f1,
        macro_f1=macro_f1,
        weighted_f1=weighted_f1,
    )
