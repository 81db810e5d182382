"""Shared-weight convolutional feature extractor for bitemporal image pairs.

A small stack of 3x3 conv + ReLU blocks, some followed by 2x2 max pooling,
applied with one parameter set to both images of a pair.  Defaults are sized
so a full training run finishes in seconds on one CPU core.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, conv2d, maxpool2, relu


@dataclass
class EncoderConfig:
    blocks: int = 3
    channels: tuple[int, ...] = (16, 32, 32)
    kernel_size: int = 3
    downsample: tuple[bool, ...] = (True, False, False)
    in_channels: int = 3

    def validate(self) -> None:
        if self.blocks < 1:
            raise ValueError("encoder needs at least one block")
        if len(self.channels) != self.blocks:
            raise ValueError(
                f"channels has {len(self.channels)} entries for {self.blocks} blocks")
        if len(self.downsample) != self.blocks:
            raise ValueError(
                f"downsample has {len(self.downsample)} entries for {self.blocks} blocks")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd and positive, got {self.kernel_size}")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel counts must be positive, got {self.channels}")

    @property
    def stride_factor(self) -> int:
        """Total spatial reduction, 2 per downsampling block."""
        return 2 ** sum(bool(d) for d in self.downsample)

    def min_input_size(self) -> int:
        """Smallest H or W keeping the output at least 4x4."""
        return 4 * self.stride_factor


@dataclass
class FeaturePair:
    """Features of the two acquisitions, produced by one weight set."""
    f_t0: Tensor
    f_t1: Tensor


class SiamConvEncoder:
    """Conv/ReLU/pool stack with He-initialised weights and zero biases."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in = cfg.in_channels
        k = cfg.kernel_size
        for c_out in cfg.channels:
            fan_in = c_in * k * k
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k))
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(c_out), requires_grad=True))
            c_in = c_out

    @property
    def out_channels(self) -> int:
        return self.cfg.channels[-1]

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"enc.block{i}.w"] = w
            params[f"enc.block{i}.b"] = b
        return params

    def _check_input(self, image: Tensor) -> None:
        if image.ndim != 3 or image.shape[0] != self.cfg.in_channels:
            raise ShapeError(
                f"encoder expects a {self.cfg.in_channels}xHxW image, got shape {image.shape}")
        factor = self.cfg.stride_factor
        _, h, w = image.shape
        if h % factor or w % factor:
            raise ShapeError(
                f"input {h}x{w} not divisible by the encoder stride {factor}; "
                f"pad to a multiple of {factor}")

    def encode(self, image) -> Tensor:
        """Map a 3xHxW image to a CxH'xW' feature map."""
        if not isinstance(image, Tensor):
            image = Tensor(image)
        self._check_input(image)
        x = image
        pad = self.cfg.kernel_size // 2
        for w, b, down in zip(self.weights, self.biases, self.cfg.downsample):
            x = relu(conv2d(x, w, b, stride=1, padding=pad))
            if down:
                x = maxpool2(x)
        return x

    def encode_pair(self, t0, t1) -> FeaturePair:
        """Encode both acquisitions with the same weights."""
        if not isinstance(t0, Tensor):
            t0 = Tensor(t0)
        if not isinstance(t1, Tensor):
            t1 = Tensor(t1)
        if t0.shape != t1.shape:
            raise ShapeError(f"image pair shapes differ: {t0.shape} vs {t1.shape}")
        return FeaturePair(self.encode(t0), self.encode(t1))
