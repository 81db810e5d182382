"""Spatial and channel attention with residual fusion.

Spatial attention re-weights every position by a softmax-normalised
similarity to all positions; channel attention does the same across
channels using the raw feature Gram matrix (no projections).  Both carry a
learnable residual scale initialised to exactly 0, so at initialisation the
whole stage is the identity map.

Fusion of the two refined maps is Fsa + Fca - F: each module already adds
the residual F once, and subtracting one copy keeps the stage an exact
identity at initialisation.  The plain elementwise sum is available as
:func:`fuse`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    conv2d,
    matmul,
    reshape,
    softmax_rows,
    transpose,
)


class SpatialAttention:
    """Position attention: three 1x1 projections and a learned scale eta."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        std = np.sqrt(2.0 / channels)
        self.proj_a = Tensor(rng.normal(0.0, std, size=(channels, channels, 1, 1)),
                             requires_grad=True)
        self.proj_b = Tensor(rng.normal(0.0, std, size=(channels, channels, 1, 1)),
                             requires_grad=True)
        self.proj_c = Tensor(rng.normal(0.0, std, size=(channels, channels, 1, 1)),
                             requires_grad=True)
        self.eta = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {
            "att.sa.a.w": self.proj_a,
            "att.sa.b.w": self.proj_b,
            "att.sa.c.w": self.proj_c,
            "att.sa.eta": self.eta,
        }

    def __call__(self, f: Tensor) -> tuple[Tensor, Tensor]:
        """Return the refined map and the N*N attention matrix.

        Row j of the attention matrix holds the softmax over source
        positions i of the projected dot product, and the refined feature
        is eta * (attended values) + f.
        """
        if f.ndim != 3:
            raise ShapeError(f"spatial attention expects CxHxW, got shape {f.shape}")
        c, h, w = f.shape
        if c != self.channels:
            raise ShapeError(f"feature has {c} channels, attention built for {self.channels}")
        n = h * w
        fa = reshape(conv2d(f, self.proj_a), (c, n))
        fb = reshape(conv2d(f, self.proj_b), (c, n))
        fc = reshape(conv2d(f, self.proj_c), (c, n))
        energy = matmul(transpose(fb), fa)          # energy[j, i] = Fa_i . Fb_j
        fs = softmax_rows(energy)
        attended = matmul(fc, transpose(fs))        # column j = sum_i fs[j,i] * Fc_i
        fsa = self.eta * reshape(attended, (c, h, w)) + f
        return fsa, fs


class ChannelAttention:
    """Channel attention from the raw feature Gram matrix; no projections."""

    def __init__(self):
        self.gamma = Tensor(np.zeros(1), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"att.ca.gamma": self.gamma}

    def __call__(self, f: Tensor) -> tuple[Tensor, Tensor]:
        """Return the refined map and the CxC attention matrix."""
        if f.ndim != 3:
            raise ShapeError(f"channel attention expects CxHxW, got shape {f.shape}")
        c, h, w = f.shape
        fm = reshape(f, (c, h * w))
        energy = matmul(fm, transpose(fm))          # energy[j, i] = F_i . F_j
        fx = softmax_rows(energy)
        attended = matmul(fx, fm)                   # row j = sum_i fx[j,i] * F_i
        fca = self.gamma * reshape(attended, (c, h, w)) + f
        return fca, fx


def fuse(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two equally shaped feature maps."""
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"fuse: shapes differ, {a.shape} vs {b.shape}")
    return a + b


@dataclass
class AttentionOut:
    """Per-branch results kept for deep supervision."""
    fsa: Tensor        # spatial-attention refined features
    fca: Tensor        # channel-attention refined features
    fused: Tensor      # fsa + fca - f
    fs: Tensor         # N*N spatial attention map
    fx: Tensor         # C*C channel attention map


class DualAttention:
    """Both attention modules plus the residual-corrected fusion."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.spatial = SpatialAttention(channels, rng)
        self.channel = ChannelAttention()

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.spatial.parameters())
        params.update(self.channel.parameters())
        return params

    def __call__(self, f: Tensor) -> AttentionOut:
        fsa, fs = self.spatial(f)
        fca, fx = self.channel(f)
        fused = fuse(fsa, fca) - f
        return AttentionOut(fsa=fsa, fca=fca, fused=fused, fs=fs, fx=fx)

    def apply_pair(self, f_t0: Tensor, f_t1: Tensor) -> tuple[AttentionOut, AttentionOut]:
        """Run both branches through the same attention parameters."""
        if f_t0.shape != f_t1.shape:
            raise ShapeError(f"feature pair shapes differ: {f_t0.shape} vs {f_t1.shape}")
        return self(f_t0), self(f_t1)
