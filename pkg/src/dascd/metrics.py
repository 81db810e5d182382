"""Distance-map thresholding and binary change-detection metrics.

Degenerate ratios follow the 0/0 -> 0 convention: a model that predicts no
positives scores zero precision rather than raising.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError


@dataclass
class MetricsReport:
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    f1: float
    oa: float

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def machine_line(self) -> str:
        """Single-line key=value record for logs and scripts."""
        return (f"tp={self.tp} fp={self.fp} tn={self.tn} fn={self.fn} "
                f"precision={self.precision:.6f} recall={self.recall:.6f} "
                f"f1={self.f1:.6f} oa={self.oa:.6f}")

    def table(self) -> str:
        lines = [
            f"{'counts':>10}  tp={self.tp}  fp={self.fp}  tn={self.tn}  fn={self.fn}",
            f"{'precision':>10}  {self.precision:.4f}",
            f"{'recall':>10}  {self.recall:.4f}",
            f"{'f1':>10}  {self.f1:.4f}",
            f"{'oa':>10}  {self.oa:.4f}",
        ]
        return "\n".join(lines)


def threshold(d: np.ndarray, t: float) -> np.ndarray:
    """Binary change map: 1 where distance exceeds t."""
    if t < 0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    return (np.asarray(d) > t).astype(np.uint8)


def confusion(pred: np.ndarray, label: np.ndarray) -> tuple[int, int, int, int]:
    """Exact (tp, fp, tn, fn) pixel counts."""
    pred = np.asarray(pred)
    label = np.asarray(label)
    if pred.shape != label.shape:
        raise ShapeError(f"prediction {pred.shape} and label {label.shape} differ")
    p = pred.astype(bool)
    y = label.astype(bool)
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    tn = int(np.count_nonzero(~p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return tp, fp, tn, fn


def metrics(tp: int, fp: int, tn: int, fn: int) -> MetricsReport:
    """Precision, recall, F1 and overall accuracy from confusion counts."""
    total = tp + fp + tn + fn
    if total <= 0:
        raise ValueError("confusion counts sum to zero")
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    oa = (tp + tn) / total
    return MetricsReport(tp=tp, fp=fp, tn=tn, fn=fn,
                         precision=precision, recall=recall, f1=f1, oa=oa)


def threshold_sweep(d: np.ndarray, label: np.ndarray,
                    grid) -> tuple[list[tuple[float, MetricsReport]], float]:
    """Metrics at every threshold in the grid plus the argmax-F1 threshold.

    Ties on F1 resolve to the smallest threshold.
    """
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("threshold grid is empty")
    rows = []
    for t in grid:
        pred = threshold(d, t)
        rows.append((t, metrics(*confusion(pred, label))))
    best_t, _ = max(rows, key=lambda row: (row[1].f1, -row[0]))
    return rows, best_t
