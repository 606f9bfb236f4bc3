"""Segmentation network: a compact UNet emitting per-pixel class probabilities.

The backbone is deliberately pluggable (any module mapping [B, C, H, W] to
[B, K, H, W] probabilities works for the trainer); the bundled implementation
is a small UNet with instance normalization, so predictions depend only on
each sample, never on batch composition.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


def _double_conv(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, padding=1),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.LeakyReLU(0.1),
        nn.Conv2d(c_out, c_out, kernel_size=3, padding=1),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.LeakyReLU(0.1),
    )


class Segmenter(nn.Module):
    """UNet-style encoder-decoder with skip connections and a softmax head."""

    def __init__(self, in_channels: int = 1, num_classes: int = 4,
                 base_width: int = 16, stages: int = 4):
        super().__init__()
        if stages < 1:
            raise ValueError("stages must be >= 1")
        self.num_classes = num_classes
        self.stages = stages

        widths = [base_width * 2**s for s in range(stages)]
        self.encoder = nn.ModuleList()
        c = in_channels
        for w in widths:
            self.encoder.append(_double_conv(c, w))
            c = w
        self.bottleneck = _double_conv(c, 2 * c)
        self.decoder = nn.ModuleList()
        c = 2 * c
        for w in reversed(widths):
            self.decoder.append(_double_conv(c + w, w))
            c = w
        self.head = nn.Conv2d(c, num_classes, kernel_size=1)
        self.pool = nn.MaxPool2d(2)

    def logits(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4:
            raise ValueError(f"expected [B, C, H, W] image, got shape {tuple(image.shape)}")
        h, w = image.shape[2], image.shape[3]
        div = 2**self.stages
        if h % div or w % div:
            raise ValueError(
                f"spatial size {h}x{w} must be divisible by {div}; "
                f"pad to {-(-h // div) * div}x{-(-w // div) * div} first"
            )
        skips = []
        x = image
        for enc in self.encoder:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for dec in self.decoder:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities, [B, K, H, W], summing to one."""
        return torch.softmax(self.logits(image), dim=1)


def predict_mask(pred: torch.Tensor | np.ndarray) -> np.ndarray:
    """Argmax over classes; ties resolve to the lowest class index."""
    probs = pred.detach().cpu().numpy() if isinstance(pred, torch.Tensor) else np.asarray(pred)
    if probs.ndim != 4:
        raise ValueError(f"expected [B, K, H, W] prediction, got shape {probs.shape}")
    return np.argmax(probs, axis=1).astype(np.int64)
