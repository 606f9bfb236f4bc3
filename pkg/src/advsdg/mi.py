"""Patch-level contrastive regularizer between source and synthesized images.

A small trainable encoder embeds both images; features gathered at shared
spatial locations form positive pairs (same location) and negatives (other
locations). The log-softmax of the positive similarity is a tractable
surrogate for the mutual information between the two images: maximizing it
keeps the synthesized image semantically aligned with its source, patch by
patch.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DEFAULT_TAU = 0.07
_NORM_TOL = 1e-3


class PatchFeatureExtractor(nn.Module):
    """Three stride-2 conv blocks plus a per-location linear head to D dims."""

    def __init__(self, in_channels: int = 1, base_width: int = 16, embed_dim: int = 128):
        super().__init__()
        widths = [base_width, 2 * base_width, 4 * base_width]
        layers = []
        c = in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, kernel_size=3, stride=2, padding=1),
                       nn.LeakyReLU(0.2)]
            c = w
        self.encoder = nn.Sequential(*layers)
        self.head = nn.Linear(c, embed_dim)
        self.embed_dim = embed_dim

    @staticmethod
    def feature_hw(h: int, w: int) -> tuple[int, int]:
        for _ in range(3):
            h = (h - 1) // 2 + 1
            w = (w - 1) // 2 + 1
        return h, w

    def forward(self, image: torch.Tensor, locations: np.ndarray | torch.Tensor) -> torch.Tensor:
        return extract_patch_features(image, locations, self)


def sample_patch_locations(feature_hw: tuple[int, int], num: int,
                           rng: np.random.Generator) -> np.ndarray:
    """Draw `num` distinct uniform (y, x) cells of an h x w feature map."""
    h, w = feature_hw
    area = h * w
    if num < 1:
        raise ValueError("need at least one patch location")
    if num > area:
        raise ValueError(f"cannot draw {num} distinct locations from a {h}x{w} map")
    flat = rng.choice(area, size=num, replace=False)
    return np.stack([flat // w, flat % w], axis=1).astype(np.int64)


def extract_patch_features(image: torch.Tensor, locations: np.ndarray | torch.Tensor,
                           params: PatchFeatureExtractor) -> torch.Tensor:
    """Embed the receptive patches at `locations`; rows are L2-normalized.

    Returns [B, P, D]. The same locations index every batch element, which is
    what lets a source batch and its synthesized counterpart share positives.
    """
    if image.ndim != 4:
        raise ValueError(f"expected [B, C, H, W] image, got shape {tuple(image.shape)}")
    loc = torch.as_tensor(np.asarray(locations), dtype=torch.long)
    if loc.ndim != 2 or loc.shape[1] != 2:
        raise ValueError(f"locations must be [P, 2], got shape {tuple(loc.shape)}")
    feat = params.encoder(image)  # [B, C, h, w]
    h, w = feat.shape[2], feat.shape[3]
    if bool((loc[:, 0] < 0).any() or (loc[:, 1] < 0).any()) or \
            bool((loc[:, 0] >= h).any() or (loc[:, 1] >= w).any()):
        raise ValueError(f"patch location out of bounds for {h}x{w} feature map")
    gathered = feat[:, :, loc[:, 0], loc[:, 1]]  # [B, C, P]
    embedded = params.head(gathered.permute(0, 2, 1))  # [B, P, D]
    return F.normalize(embedded, dim=-1, eps=1e-12)


def positive_log_softmax(pos_logits: torch.Tensor, neg_logits: torch.Tensor) -> torch.Tensor:
    """log softmax of the positive logit against its negatives, per row."""
    all_logits = torch.cat([pos_logits.unsqueeze(-1), neg_logits], dim=-1)
    return pos_logits - torch.logsumexp(all_logits, dim=-1)


def _check_normalized(f: torch.Tensor, name: str) -> None:
    norms = f.detach().norm(dim=-1)
    worst = float((norms - 1.0).abs().max())
    if worst > _NORM_TOL:
        raise ValueError(f"{name} rows must be L2-normalized (max deviation {worst:.2e})")


def contrastive_mi_loss(f_src: torch.Tensor, f_syn: torch.Tensor,
                        tau: float = DEFAULT_TAU, literal_negatives: bool = False) -> torch.Tensor:
    """Mean patch-contrastive log-likelihood; always <= 0, maximized in training.

    Positives pair each synthesized-patch feature with the source feature at
    the same location. By default negatives pair the synthesized query with
    source features at other locations; `literal_negatives` instead scores
    source-against-source pairs in the denominator, which makes the negative
    terms independent of the synthesized image.

    Accepts [P, D] or batched [B, P, D] inputs (batch entries averaged).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if f_src.shape != f_syn.shape:
        raise ValueError(f"feature shapes differ: {tuple(f_src.shape)} vs {tuple(f_syn.shape)}")
    if f_src.ndim == 2:
        f_src, f_syn = f_src.unsqueeze(0), f_syn.unsqueeze(0)
    if f_src.ndim != 3:
        raise ValueError("features must be [P, D] or [B, P, D]")
    p = f_src.shape[1]
    if p < 2:
        raise ValueError("need at least two patches for contrast")
    _check_normalized(f_src, "f_src")
    _check_normalized(f_syn, "f_syn")

    pos = (f_syn * f_src).sum(dim=-1)  # [B, P]
    neg_source = f_syn if not literal_negatives else f_src
    grid = torch.bmm(neg_source, f_src.transpose(1, 2))  # [B, P, P]
    off_diag = ~torch.eye(p, dtype=torch.bool, device=grid.device)
    neg = grid[:, off_diag].reshape(grid.shape[0], p, p - 1)
    return positive_log_softmax(pos / tau, neg / tau).mean()
