"""Popularity heads and the training loss.

Predictions live in ``log2(x + 1)`` space; the heads regress that value
directly and raw counts are recovered with ``2**y - 1`` clipped at zero.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn

from .diffusion_data import ConfigError


def log_popularity(labels) -> Tensor:
    labels = torch.as_tensor(labels, dtype=torch.get_default_dtype())
    if bool((labels < 0).any()):
        raise ValueError("popularity labels must be non-negative")
    return torch.log2(labels + 1)


def to_count(pred_log) -> Tensor:
    return torch.clamp(torch.exp2(torch.as_tensor(pred_log)) - 1, min=0)


class Head(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.hidden = nn.Linear(d, d)
        self.out = nn.Linear(d, 1)

    def forward(self, h: Tensor) -> Tensor:
        return self.out(torch.relu(self.hidden(h))).squeeze(-1)


class PredictionHeads(nn.Module):
    def __init__(self, d: int, lam: float = 0.1):
        super().__init__()
        if not 0.0 <= lam <= 1.0:
            raise ConfigError(f"fusion weight must lie in [0, 1], got {lam}")
        self.lam = float(lam)
        self.f_static = Head(d)
        self.f_dynamic = Head(d)

    def init_output_bias(self, value: float) -> None:
        with torch.no_grad():
            self.f_static.out.bias.fill_(value)
            self.f_dynamic.out.bias.fill_(value)

    def forward(self, h_static: Tensor, h_dynamic: Tensor) -> Tensor:
        return self.lam * self.f_static(h_static) + (1 - self.lam) * self.f_dynamic(h_dynamic)


def predict(h_static: Tensor, h_dynamic: Tensor, heads: PredictionHeads) -> Tensor:
    return heads(h_static, h_dynamic)


def msle_loss(predictions: Tensor, labels) -> Tensor:
    """Mean of ``(log2(label + 1) - prediction)**2``."""
    if predictions.numel() == 0:
        raise ValueError("empty batch")
    target = log_popularity(labels).to(predictions.dtype)
    if target.shape != predictions.shape:
        raise ValueError(f"shape mismatch: {tuple(predictions.shape)} vs {tuple(target.shape)}")
    return torch.mean((target - predictions) ** 2)
