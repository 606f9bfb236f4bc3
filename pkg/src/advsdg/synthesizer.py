"""Texture synthesizer: a shallow CNN with per-block random style injection.

The synthesizer perturbs only texture: a stack of narrow 3x3 conv blocks,
each followed by LeakyReLU and style injection (per-channel mean/std swap),
then a projection back to image space. The raw output is rescaled to the
input's intensity statistics and blended with the input by a mix ratio, so
the identity is always reachable (alpha = 0) and intensities never run away.

Two independently initialized instances trained to maximize segmentation
disagreement provide the adversarial "new domains"; freshly re-randomized
instances (no training) reproduce the random-convolution augmentation
baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

LEAKY_SLOPE = 0.2
_EPS = 1e-5


@dataclass
class StyleNoise:
    """Per-block, per-channel style statistics injected into the synthesizer."""

    means: list[torch.Tensor]  # block b -> [C_b]
    stds: list[torch.Tensor]  # block b -> [C_b], strictly positive

    def __post_init__(self):
        if len(self.means) != len(self.stds):
            raise ValueError("means and stds must have one entry per block")
        for b, (m, s) in enumerate(zip(self.means, self.stds)):
            if m.shape != s.shape:
                raise ValueError(f"block {b}: mean/std shape mismatch")
            if not bool((s > 0).all()):
                raise ValueError(f"block {b}: style stds must be strictly positive")

    @property
    def channel_counts(self) -> tuple[int, ...]:
        return tuple(m.numel() for m in self.means)


def sample_style(rng: torch.Generator, channel_counts: tuple[int, ...] = (2, 2, 2, 2)) -> StyleNoise:
    """Draw style means ~ N(0,1) and stds = softplus(N(0,1)) + 0.1 per channel."""
    means, stds = [], []
    for c in channel_counts:
        means.append(torch.randn(c, generator=rng))
        stds.append(F.softplus(torch.randn(c, generator=rng)) + 0.1)
    return StyleNoise(means=means, stds=stds)


def adain(features: torch.Tensor, style_mean: torch.Tensor, style_std: torch.Tensor,
          eps: float = _EPS) -> torch.Tensor:
    """Replace each channel's spatial mean/std with the injected style values.

    Channels whose spatial std falls below `eps` get `eps` added to the
    denominator instead of failing, so constant channels map to `style_mean`.
    """
    if features.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] features, got shape {tuple(features.shape)}")
    c = features.shape[1]
    if style_mean.numel() != c or style_std.numel() != c:
        raise ValueError(f"style vectors must have {c} channels")
    mu = features.mean(dim=(2, 3), keepdim=True)
    var = features.var(dim=(2, 3), unbiased=False, keepdim=True)
    sigma = torch.sqrt(var + 1e-12)
    denom = torch.where(sigma < eps, sigma + eps, sigma)
    normalized = (features - mu) / denom
    return style_std.view(1, c, 1, 1) * normalized + style_mean.view(1, c, 1, 1)


def match_intensity(raw: torch.Tensor, reference: torch.Tensor, eps: float = _EPS) -> torch.Tensor:
    """Rescale `raw` to the per-sample intensity mean/std of `reference`."""
    dims = (1, 2, 3)
    mu_raw = raw.mean(dim=dims, keepdim=True)
    sd_raw = torch.sqrt(raw.var(dim=dims, unbiased=False, keepdim=True) + 1e-12)
    mu_ref = reference.mean(dim=dims, keepdim=True)
    sd_ref = torch.sqrt(reference.var(dim=dims, unbiased=False, keepdim=True) + 1e-12)
    return (raw - mu_raw) / (sd_raw + eps) * sd_ref + mu_ref


class DomainSynthesizer(nn.Module):
    """Shallow conv net with style injection after every hidden block."""

    def __init__(self, in_channels: int = 1, hidden_channels: int = 2, num_blocks: int = 4):
        super().__init__()
        if num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        blocks = []
        c = in_channels
        for _ in range(num_blocks):
            blocks.append(nn.Conv2d(c, hidden_channels, kernel_size=3, padding=1))
            c = hidden_channels
        self.blocks = nn.ModuleList(blocks)
        self.proj = nn.Conv2d(hidden_channels, in_channels, kernel_size=3, padding=1)

    @property
    def channel_counts(self) -> tuple[int, ...]:
        return tuple(b.out_channels for b in self.blocks)

    def forward(self, image: torch.Tensor, noise: StyleNoise,
                alpha: float | torch.Tensor) -> torch.Tensor:
        return synthesize(image, noise, alpha, self)


def synthesize(image: torch.Tensor, noise: StyleNoise, alpha: float | torch.Tensor,
               params: DomainSynthesizer) -> torch.Tensor:
    """Texture-perturb `image`: styled conv stack, intensity match, then mixup.

    `alpha` in [0, 1] blends the perturbed image with the original;
    alpha = 0 returns the input exactly. A scalar alpha is shared across the
    batch; a [B] tensor applies per sample.
    """
    if image.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] image, got shape {tuple(image.shape)}")
    if image.shape[2] < 8 or image.shape[3] < 8:
        raise ValueError("image spatial size must be at least 8x8")
    if image.shape[1] != params.in_channels:
        raise ValueError(f"image has {image.shape[1]} channels, synthesizer expects "
                         f"{params.in_channels}")
    if noise.channel_counts != params.channel_counts:
        raise ValueError(f"style channel counts {noise.channel_counts} do not match "
                         f"synthesizer blocks {params.channel_counts}")
    if isinstance(alpha, torch.Tensor):
        if alpha.ndim > 1 or (alpha.ndim == 1 and alpha.shape[0] != image.shape[0]):
            raise ValueError("tensor alpha must be a scalar or one value per sample")
        alpha_view = alpha.reshape(-1, 1, 1, 1).to(image.dtype)
        a_min, a_max = float(alpha.min()), float(alpha.max())
    else:
        alpha_view = float(alpha)
        a_min = a_max = float(alpha)
    if a_min < 0.0 or a_max > 1.0:
        raise ValueError(f"mix ratio must lie in [0, 1], got range [{a_min}, {a_max}]")

    x = image
    for block, mean, std in zip(params.blocks, noise.means, noise.stds):
        x = block(x)
        x = F.leaky_relu(x, LEAKY_SLOPE)
        x = adain(x, mean.to(x.dtype), std.to(x.dtype))
    raw = params.proj(x)
    styled = match_intensity(raw, image)
    return alpha_view * styled + (1 - alpha_view) * image


def init_synthesizer_(params: DomainSynthesizer, rng: torch.Generator) -> DomainSynthesizer:
    """(Re)initialize conv weights in place: Kaiming fan-in scaled for the leaky slope."""
    gain = math.sqrt(2.0 / (1.0 + LEAKY_SLOPE**2))
    with torch.no_grad():
        for conv in list(params.blocks) + [params.proj]:
            fan_in = conv.weight[0].numel()
            conv.weight.normal_(0.0, gain / math.sqrt(fan_in), generator=rng)
            conv.bias.zero_()
    return params


def random_init(seed_or_rng: int | torch.Generator, in_channels: int = 1,
                hidden_channels: int = 2, num_blocks: int = 4) -> DomainSynthesizer:
    """Fresh randomly initialized synthesizer, meant to be used without training.

    Drawing a new instance per step (together with a uniform mix ratio)
    reproduces the random-convolution augmentation baseline; a single frozen
    draw serves the no-adversarial-update ablation.
    """
    if isinstance(seed_or_rng, torch.Generator):
        rng = seed_or_rng
    else:
        rng = torch.Generator(device="cpu")
        rng.manual_seed(int(seed_or_rng))
    synth = DomainSynthesizer(in_channels=in_channels, hidden_channels=hidden_channels,
                              num_blocks=num_blocks)
    return init_synthesizer_(synth, rng)
