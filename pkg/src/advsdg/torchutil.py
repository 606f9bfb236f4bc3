"""Shared torch helpers: deterministic initialization and parameter hashing."""

from __future__ import annotations

import hashlib
import math

import torch
from torch import nn


def init_parameters_(module: nn.Module, rng: torch.Generator,
                     leaky_slope: float = 0.1) -> nn.Module:
    """Kaiming-init all convs/linears from an explicit generator; norms to identity."""
    gain = math.sqrt(2.0 / (1.0 + leaky_slope**2))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, gain / math.sqrt(fan_in), generator=rng)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.InstanceNorm2d, nn.BatchNorm2d)) and m.affine:
                m.weight.fill_(1.0)
                m.bias.zero_()
    return module


def parameter_hash(module: nn.Module) -> str:
    """SHA-256 over all parameter bytes, in name order."""
    digest = hashlib.sha256()
    for name, param in sorted(module.named_parameters()):
        digest.update(name.encode("utf-8"))
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
