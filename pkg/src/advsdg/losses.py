"""Scalar training objectives and the per-step loss report."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

LOG_EPS = 1e-8


def _check_soft_prediction(p: torch.Tensor, name: str) -> None:
    if p.ndim != 4:
        raise ValueError(f"{name} must be [B, K, H, W], got shape {tuple(p.shape)}")
    vals = p.detach()
    if float(vals.min()) < -1e-6:
        raise ValueError(f"{name} contains negative probabilities")
    worst = float((vals.sum(dim=1) - 1.0).abs().max())
    if worst > 1e-3:
        raise ValueError(f"{name} rows are not a probability simplex (max deviation {worst:.2e})")


def kl_divergence(p: torch.Tensor, q: torch.Tensor, eps: float = LOG_EPS) -> torch.Tensor:
    """Pixelwise KL(p || q) averaged over batch and space, epsilon-guarded."""
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    _check_soft_prediction(p, "p")
    _check_soft_prediction(q, "q")
    return (p * (torch.log(p + eps) - torch.log(q + eps))).sum(dim=1).mean()


def consistency_loss(pred1: torch.Tensor, pred2: torch.Tensor) -> torch.Tensor:
    """Disagreement between the two synthesized-view predictions: KL(pred1 || pred2)."""
    return kl_divergence(pred1, pred2)


def soft_dice_loss(pred: torch.Tensor, labels: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    k = pred.shape[1]
    onehot = torch.nn.functional.one_hot(labels, k).permute(0, 3, 1, 2).to(pred.dtype)
    inter = (pred * onehot).sum(dim=(2, 3))
    denom = pred.sum(dim=(2, 3)) + onehot.sum(dim=(2, 3))
    return 1.0 - ((2.0 * inter + smooth) / (denom + smooth)).mean()


def supervised_loss(pred: torch.Tensor, labels: torch.Tensor,
                    dice_weight: float = 0.0, eps: float = LOG_EPS) -> torch.Tensor:
    """Per-pixel cross-entropy against integer labels, optionally plus soft Dice."""
    _check_soft_prediction(pred, "pred")
    if labels.shape != (pred.shape[0],) + pred.shape[2:]:
        raise ValueError(f"labels shape {tuple(labels.shape)} does not match prediction "
                         f"{tuple(pred.shape)}")
    k = pred.shape[1]
    if int(labels.max()) >= k or int(labels.min()) < 0:
        raise ValueError(f"labels must lie in [0, {k - 1}]")
    picked = pred.gather(1, labels.unsqueeze(1).long()).squeeze(1)
    loss = -(torch.log(picked + eps)).mean()
    if dice_weight > 0.0:
        loss = loss + dice_weight * soft_dice_loss(pred, labels.long())
    return loss


@dataclass
class LossReport:
    """All scalar terms of one training step.

    `seg_total` is the segmenter's descent objective, `adv_total` the
    adversary's ascent objective; terms inactive under the current training
    mode are exactly zero.
    """

    sup_1: float
    sup_2: float
    cons: float
    mi_1: float
    mi_2: float
    seg_total: float
    adv_total: float

    @classmethod
    def build(cls, sup_1: float = 0.0, sup_2: float = 0.0, cons: float = 0.0,
              mi_1: float = 0.0, mi_2: float = 0.0) -> "LossReport":
        return cls(sup_1=sup_1, sup_2=sup_2, cons=cons, mi_1=mi_1, mi_2=mi_2,
                   seg_total=sup_1 + sup_2 + cons, adv_total=cons + mi_1 + mi_2)

    def validate(self) -> None:
        if abs(self.seg_total - (self.sup_1 + self.sup_2 + self.cons)) > 1e-6:
            raise ValueError("seg_total does not equal sup_1 + sup_2 + cons")
        if abs(self.adv_total - (self.cons + self.mi_1 + self.mi_2)) > 1e-6:
            raise ValueError("adv_total does not equal cons + mi_1 + mi_2")

    def as_dict(self) -> dict[str, float]:
        return asdict(self)
