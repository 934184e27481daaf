"""Per-sample, per-channel standardization and the statistics token."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .numeric import ContractError

EPS = 1e-8


@dataclass
class ChannelStats:
    mean: torch.Tensor  # (B, C)
    std: torch.Tensor  # (B, C), population std
    eps: float = EPS


def normalize_per_channel(x: torch.Tensor, eps: float = EPS):
    """Standardize each channel of a (B, T, C) or (T, C) signal over time."""
    if x.shape[-2] < 1:
        raise ContractError("empty signal")
    mean = x.mean(dim=-2, keepdim=True)
    std = ((x - mean) ** 2).mean(dim=-2, keepdim=True).sqrt()
    xn = (x - mean) / std.clamp_min(eps)
    return xn, ChannelStats(mean.squeeze(-2), std.squeeze(-2), eps)


def slog(x: torch.Tensor) -> torch.Tensor:
    return torch.sign(x) * torch.log1p(x.abs())


def stats_features(stats: ChannelStats) -> torch.Tensor:
    """(..., C, 2) pairs (slog mean, log(std + eps))."""
    return torch.stack([slog(stats.mean), torch.log(stats.std + stats.eps)], dim=-1)


class StatsEncoder(nn.Module):
    """Shared 2 -> D map over channel statistics, mean-pooled over channels."""

    def __init__(self, d_model: int):
        super().__init__()
        self.proj = nn.Linear(2, d_model)

    def forward(self, stats: ChannelStats) -> torch.Tensor:
        return self.proj(stats_features(stats)).mean(dim=-2)  # (..., D)


def encode_stats(stats: ChannelStats, encoder: StatsEncoder) -> torch.Tensor:
    return encoder(stats)


def inject_stats(h: torch.Tensor, token: torch.Tensor | None) -> torch.Tensor:
    """Prepend the stats token at position 0: (B, N, D) -> (B, N+1, D).

    ``token=None`` is the ablation path and returns ``h`` unchanged.
    """
    if token is None:
        return h
    if token.shape[-1] != h.shape[-1]:
        raise ContractError(f"stats token dim {token.shape[-1]} != feature dim {h.shape[-1]}")
    token = token.reshape(h.shape[0], 1, h.shape[-1])
    return torch.cat([token, h], dim=1)
