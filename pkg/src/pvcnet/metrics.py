"""Confusion counts and the five detection scores.

Scores are fractions internally; text and CSV renderings use percentages
with two decimals. An undefined score (zero denominator) is ``None`` and
renders as ``/``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = ("acc", "se", "sp", "ppv", "youden")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion(outputs, targets, threshold: float = 0.5) -> ConfusionMatrix:
    """Predict PVC when ``output >= threshold``."""
    pred = np.asarray(outputs, dtype=np.float64).reshape(-1) >= threshold
    true = np.asarray(targets).reshape(-1) == 1
    if pred.shape != true.shape:
        raise ValueError("outputs and targets differ in length")
    return ConfusionMatrix(
        tp=int(np.count_nonzero(pred & true)),
        fp=int(np.count_nonzero(pred & ~true)),
        tn=int(np.count_nonzero(~pred & ~true)),
        fn=int(np.count_nonzero(~pred & true)),
    )


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    ppv: float | None
    youden: float | None

    def values(self) -> tuple:
        return (self.accuracy, self.sensitivity, self.specificity, self.ppv, self.youden)

    def as_text(self) -> str:
        """Flat ``key=value`` block, one score per line."""
        return "\n".join(f"{k}={fmt_pct(v)}" for k, v in zip(CSV_COLUMNS, self.values()))

    def csv_row(self) -> list[str]:
        return [fmt_pct(v) for v in self.values()]


def fmt_pct(value: float | None) -> str:
    return "/" if value is None else f"{100 * value:.2f}"


def youden_index(sensitivity: float | None, specificity: float | None) -> float | None:
    if sensitivity is None or specificity is None:
        return None
    return sensitivity + specificity - 1


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    if cm.total == 0:
        raise ValueError("metrics need at least one evaluated sample")
    se = _ratio(cm.tp, cm.tp + cm.fn)
    sp = _ratio(cm.tn, cm.tn + cm.fp)
    return MetricsReport(
        accuracy=(cm.tp + cm.tn) / cm.total,
        sensitivity=se,
        specificity=sp,
        ppv=_ratio(cm.tp, cm.tp + cm.fp),
        youden=youden_index(se, sp),
    )
