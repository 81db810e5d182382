"""Contrastive losses over pixel-pair distance maps.

The weighted double-margin loss hinges unchanged pairs above a lower margin
m1 and changed pairs below an upper margin m2, with per-class weights
computed from dataset pixel frequencies.  Setting m1=0, w1=w2=1, m2=m
recovers the plain contrastive loss exactly.

On the changed branch the hinge is max(m2 - d, 0)^2, the standard
contrastive direction that pushes changed pairs apart; a transcription that
hinges on d - m2 instead would be minimised by collapsing changed pairs to
distance zero.

Losses are averaged over pixels by default so that margins and learning
rates transfer across image sizes; pass reduction="sum" for the raw
per-pixel sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, relu, sqrt, tsum, where


@dataclass
class LossConfig:
    m1: float = 0.3            # unchanged pairs may sit this far apart for free
    m2: float = 2.2            # changed pairs are pushed at least this far
    w1: float = 1.0            # unchanged-pair weight
    w2: float = 1.0            # changed-pair weight
    lambda1: float = 1.0       # spatial-attention supervision weight
    lambda2: float = 1.0       # channel-attention supervision weight
    lambda3: float = 1.0       # final-output supervision weight
    reduction: str = "mean"    # "mean" or "sum" over pixels

    def validate(self) -> None:
        if self.m1 < 0:
            raise ValueError(f"m1 must be non-negative, got {self.m1}")
        if self.m2 <= self.m1:
            raise ValueError(f"m2 ({self.m2}) must exceed m1 ({self.m1})")
        if self.w1 <= 0 or self.w2 <= 0:
            raise ValueError(f"class weights must be positive, got w1={self.w1}, w2={self.w2}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("supervision weights must be non-negative")
        if self.reduction not in ("mean", "sum"):
            raise ValueError(f"unknown reduction {self.reduction!r}")

    @property
    def midpoint(self) -> float:
        """Centre of the (m1, m2) dead zone, the default decision threshold."""
        return 0.5 * (self.m1 + self.m2)


def pixel_distance(f0: Tensor, f1: Tensor, metric: str = "l2") -> Tensor:
    """Per-pixel distance between two CxHxW feature maps.

    l2 is the Euclidean norm of the channel-vector difference; cosine is
    1 - cos(f0, f1) in [0, 2], with a zero vector on either side treated as
    orthogonal (distance 1, zero gradient there).
    """
    if not isinstance(f0, Tensor):
        f0 = Tensor(f0)
    if not isinstance(f1, Tensor):
        f1 = Tensor(f1)
    if f0.shape != f1.shape:
        raise ShapeError(f"feature shapes differ: {f0.shape} vs {f1.shape}")
    if f0.ndim != 3:
        raise ShapeError(f"pixel_distance expects CxHxW maps, got shape {f0.shape}")
    if metric == "l2":
        diff = f0 - f1
        return sqrt(tsum(diff * diff, axis=0))
    if metric == "cosine":
        dot = tsum(f0 * f1, axis=0)
        n0 = sqrt(tsum(f0 * f0, axis=0))
        n1 = sqrt(tsum(f1 * f1, axis=0))
        denom = n0 * n1
        zero = denom.data == 0.0
        safe = where(zero, Tensor(np.ones_like(denom.data)), denom)
        d = 1.0 - dot / safe
        d = where(zero, Tensor(np.ones_like(denom.data)), d)
        # cos may exceed 1 by a few ulp; clamp the resulting dust below 0
        return where(d.data < 0.0, Tensor(np.zeros_like(d.data)), d)
    raise ValueError(f"unknown distance metric {metric!r}")


def _check_label(d: Tensor, y: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != d.shape:
        raise ShapeError(f"distance map {d.shape} and label map {y.shape} differ")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("label map must be binary")
    return y.astype(np.float64)


def _reduce(total: Tensor, count: int, reduction: str) -> Tensor:
    if reduction == "mean":
        return total * (1.0 / count)
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


def contrastive_loss(d: Tensor, y, margin: float, reduction: str = "mean") -> Tensor:
    """Plain contrastive loss: pull unchanged to 0, push changed past margin."""
    if not isinstance(d, Tensor):
        d = Tensor(d)
    yf = _check_label(d, y)
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    unchanged = Tensor(1.0 - yf)
    changed = Tensor(yf)
    per_pixel = unchanged * relu(d - 0.0) ** 2 + changed * relu(margin - d) ** 2
    return _reduce(0.5 * tsum(per_pixel), d.size, reduction)


def wdmc_loss(d: Tensor, y, cfg: LossConfig) -> Tensor:
    """Weighted double-margin contrastive loss over a distance map."""
    if not isinstance(d, Tensor):
        d = Tensor(d)
    cfg.validate()
    yf = _check_label(d, y)
    unchanged = Tensor(cfg.w1 * (1.0 - yf))
    changed = Tensor(cfg.w2 * yf)
    per_pixel = unchanged * relu(d - cfg.m1) ** 2 + changed * relu(cfg.m2 - d) ** 2
    return _reduce(0.5 * tsum(per_pixel), d.size, reduction=cfg.reduction)


def class_weights(n_changed: int, n_unchanged: int) -> tuple[float, float]:
    """Inverse-frequency weights (w1 for unchanged, w2 for changed pairs)."""
    if n_changed <= 0 or n_unchanged <= 0:
        raise ValueError(
            f"both classes need pixels to define frequencies, got changed={n_changed}, "
            f"unchanged={n_unchanged}; clamp or rebalance the dataset")
    total = float(n_changed + n_unchanged)
    p_unchanged = n_unchanged / total
    p_changed = n_changed / total
    return 1.0 / p_unchanged, 1.0 / p_changed


def total_loss(l_sa, l_ca, l_e, cfg: LossConfig) -> Tensor:
    """Deep-supervision combination of the three stage losses."""
    return cfg.lambda1 * l_sa + cfg.lambda2 * l_ca + cfg.lambda3 * l_e


def downsample_labels(y: np.ndarray, factor: int) -> np.ndarray:
    """Majority-vote label reduction to feature resolution; ties go changed."""
    y = np.asarray(y)
    if factor == 1:
        return y.astype(np.uint8)
    h, w = y.shape
    if h % factor or w % factor:
        raise ShapeError(f"label {h}x{w} not divisible by factor {factor}")
    cells = y.reshape(h // factor, factor, w // factor, factor).astype(np.float64)
    frac = cells.mean(axis=(1, 3))
    return (frac >= 0.5).astype(np.uint8)
