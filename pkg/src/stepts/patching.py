"""Learnable adaptive patching.

A (B, T, C) signal is convolved per channel to (B, T, C, D), sampled under
N overlapping Gaussian windows whose placement depends on a learned stride
S = 1 + exp(mlp(log T)), attended axially (taps, then channels) and pooled
to (B, N, D). All tensor layouts carry a leading batch axis; samples in one
batch share T and therefore share the stride.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import PatchingConfig
from .numeric import ContractError, huber


def channel_conv(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None) -> torch.Tensor:
    """Same-padded 1-D convolution shared across channels: (B, T, C) -> (B, T, C, D)."""
    if x.dim() != 3 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ContractError(f"expected a non-empty (B, T, C) signal, got {tuple(x.shape)}")
    b, t, c = x.shape
    k = weight.shape[-1]
    flat = x.permute(0, 2, 1).reshape(b * c, 1, t)
    out = F.conv1d(flat, weight, bias, padding=k // 2)  # (B*C, D, T)
    return out.reshape(b, c, -1, t).permute(0, 3, 1, 2)


class ChannelConv(nn.Module):
    def __init__(self, d_model: int, kernel_size: int = 5):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ContractError("kernel_size must be odd for same padding")
        conv = nn.Conv1d(1, d_model, kernel_size)
        self.weight = conv.weight
        self.bias = conv.bias

    def forward(self, x):
        return channel_conv(x, self.weight, self.bias)


class StrideLearner(nn.Module):
    """S = 1 + exp(mlp(log T)) with a 1 -> hidden -> 1 tanh perceptron."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.fc1 = nn.Linear(1, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, length) -> torch.Tensor:
        if length < 2:
            raise ContractError(f"stride learner needs T >= 2, got {length}")
        logt = torch.full((1, 1), math.log(length), dtype=self.fc1.weight.dtype)
        return 1.0 + torch.exp(self.fc2(torch.tanh(self.fc1(logt)))).reshape(())

    @torch.no_grad()
    def zero_(self):
        for p in self.parameters():
            p.zero_()
        return self

    @torch.no_grad()
    def fit_initial(self, tokens: int, t_lo: float = 4.0, t_hi: float = 1e5):
        """Spread tanh knots over log T and least-squares fit the output layer
        so that S(T) ~ T / (tokens + 1), i.e. about ``tokens`` windows."""
        h = self.fc1.out_features
        knots = np.linspace(math.log(t_lo), math.log(t_hi), h)
        self.fc1.weight.fill_(1.0)
        self.fc1.bias.copy_(torch.as_tensor(-knots))
        grid = np.linspace(math.log(t_lo), math.log(t_hi), 400)
        feats = np.tanh(grid[:, None] - knots[None, :])
        design = np.concatenate([feats, np.ones((len(grid), 1))], axis=1)
        target = np.log(np.maximum(np.exp(grid) / (tokens + 1) - 1.0, 0.1))
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        self.fc2.weight.copy_(torch.as_tensor(coef[:-1]).reshape(1, h))
        self.fc2.bias.fill_(float(coef[-1]))
        return self


def learn_stride(length: int, learner: StrideLearner) -> torch.Tensor:
    return learner(length)


def smooth_floor_one(x: torch.Tensor, sharpness: float = 10.0) -> torch.Tensor:
    """Smooth max(1, x): 1 + softplus(k (x - 1)) / k."""
    return 1.0 + torch.logaddexp(torch.zeros_like(x), sharpness * (x - 1.0)) / sharpness


def estimate_length(length: int, stride: torch.Tensor, sharpness: float = 10.0) -> torch.Tensor:
    """Differentiable window count N' = max(1, (T - 2S) / S + 1), smoothly clamped."""
    stride = torch.as_tensor(stride, dtype=torch.get_default_dtype()) if not torch.is_tensor(stride) else stride
    return smooth_floor_one(length / stride - 1.0, sharpness)


def stride_penalty(stride, s_max: float = 400.0, delta: float = 1.0) -> torch.Tensor:
    stride = torch.as_tensor(stride, dtype=torch.get_default_dtype()) if not torch.is_tensor(stride) else stride
    return huber(F.relu(torch.log(stride) - math.log(s_max)), delta)


def length_penalty(n_est, n_min: float = 5.0, n_max: float = 200.0, delta: float = 1.0) -> torch.Tensor:
    n_est = torch.as_tensor(n_est, dtype=torch.get_default_dtype()) if not torch.is_tensor(n_est) else n_est
    log_n = torch.log(n_est)
    return huber(F.relu(log_n - math.log(n_max)), delta) + huber(F.relu(math.log(n_min) - log_n), delta)


def n_windows(length: int, stride: float, beta: float = 2.0) -> int:
    width = beta * stride
    if length < width:
        return 1
    # the 1e-9 slack keeps exact ratios (forced strides) from flooring one short
    return int(math.floor((length - width) / stride + 1e-9)) + 1


def taps_per_window(width: float, k_min: int = 4, k_max: int = 64) -> int:
    """Odd tap count near W+1 so there is always a tap on the window center."""
    w = min(max(width, k_min), k_max)
    return 2 * int(round(w / 2)) + 1


@dataclass
class GaussianWindowBank:
    length: int
    stride: torch.Tensor
    width: torch.Tensor
    centers: torch.Tensor  # (N,)
    positions: torch.Tensor  # (N, K), clipped to [0, T-1]
    weights: torch.Tensor  # (N, K), rows sum to 1

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def k(self) -> int:
        return self.positions.shape[1]


def build_windows(
    length: int, stride: torch.Tensor, beta: float = 2.0, k_min: int = 4, k_max: int = 64, exact: float | None = None
) -> GaussianWindowBank:
    """``exact`` optionally gives the stride at full precision for the integer counts."""
    if not torch.is_tensor(stride):
        stride = torch.as_tensor(float(stride), dtype=torch.get_default_dtype())
    s_val = float(stride.detach()) if exact is None else float(exact)
    if s_val <= 1.0 or length < 2:
        raise ContractError(f"build_windows needs S > 1 and T >= 2, got S={s_val}, T={length}")
    dtype = stride.dtype
    width = beta * stride
    n = n_windows(length, s_val, beta)
    k = taps_per_window(beta * s_val, k_min, k_max)
    idx = torch.arange(n, dtype=dtype)
    if length < beta * s_val:
        starts = torch.full((1,), (length - 1) / 2.0, dtype=dtype) - width / 2
    else:
        starts = idx * stride
    centers = starts + width / 2
    frac = torch.linspace(0.0, 1.0, k, dtype=dtype)
    raw = starts[:, None] + frac[None, :] * width  # (N, K)
    sigma = width / 4
    logits = -((raw - centers[:, None]) ** 2) / (2 * sigma**2)
    weights = torch.softmax(logits, dim=1)
    positions = raw.clamp(0.0, length - 1.0)
    return GaussianWindowBank(length, stride, width, centers, positions, weights)


def interpolate(xp: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Linear interpolation of (B, T, ...) along T at fractional positions (P,)."""
    t = xp.shape[1]
    i0 = positions.detach().floor().clamp(0, t - 1).long()
    i1 = (i0 + 1).clamp(max=t - 1)
    frac = positions - i0.to(positions.dtype)
    shape = (1, -1) + (1,) * (xp.dim() - 2)
    frac = frac.reshape(shape)
    return xp[:, i0] * (1 - frac) + xp[:, i1] * frac


def extract_patches(xp: torch.Tensor, bank: GaussianWindowBank) -> torch.Tensor:
    """(B, T, C, D) -> (B, N, K, C, D), each tap interpolated and scaled by its weight."""
    if xp.shape[1] != bank.length:
        raise ContractError(f"window bank built for T={bank.length}, signal has T={xp.shape[1]}")
    b, _, c, d = xp.shape
    vals = interpolate(xp, bank.positions.reshape(-1)).reshape(b, bank.n, bank.k, c, d)
    return vals * bank.weights[None, :, :, None, None]


class SelfAttention(nn.Module):
    """Single-head scaled dot-product self-attention with a residual, over axis -2."""

    def __init__(self, d_model: int):
        super().__init__()
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.o = nn.Linear(d_model, d_model)
        self.scale = 1.0 / math.sqrt(d_model)

    def forward(self, x):
        d = x.shape[-1]
        if x.shape[-2] == 1:
            # softmax over one key is exactly 1
            v = F.linear(x, self.qkv.weight[2 * d :], self.qkv.bias[2 * d :])
            return x + self.o(v)
        q, k, v = self.qkv(x).split(d, dim=-1)
        att = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        return x + self.o(att @ v)


class AxialAttentionPool(nn.Module):
    """Attend along taps (per channel), then along channels (per tap), then
    average over both. Tap values are rescaled by K first, so the tap mean of
    a weighted patch is its Gaussian-weighted average."""

    def __init__(self, d_model: int):
        super().__init__()
        self.temporal = SelfAttention(d_model)
        self.channel = SelfAttention(d_model)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        _, _, k, _, _ = patches.shape
        h = patches * k
        h = self.temporal(h.transpose(2, 3)).transpose(2, 3)  # (B, N, K, C, D)
        h = self.channel(h)
        return h.mean(dim=(2, 3))


def axial_attend_pool(patches: torch.Tensor, module: AxialAttentionPool) -> torch.Tensor:
    return module(patches)


@dataclass
class PatchingState:
    stride: torch.Tensor
    window_length: torch.Tensor
    n_estimate: torch.Tensor
    n_windows: int
    taps: int
    stride_penalty: torch.Tensor
    length_penalty: torch.Tensor
    forced: bool = False

    @property
    def penalty(self) -> torch.Tensor:
        return self.stride_penalty + self.length_penalty


def pad_short(x: torch.Tensor, min_length: int) -> torch.Tensor:
    """Right-pad (B, T, C) with edge values up to ``min_length``."""
    t = x.shape[1]
    if t >= min_length:
        return x
    return torch.cat([x, x[:, -1:].expand(-1, min_length - t, -1)], dim=1)


class AdaptivePatching(nn.Module):
    def __init__(self, d_model: int, cfg: PatchingConfig | None = None):
        super().__init__()
        self.cfg = cfg or PatchingConfig()
        self.conv = ChannelConv(d_model, self.cfg.kernel_size)
        self.stride_learner = StrideLearner(self.cfg.stride_hidden).fit_initial(self.cfg.init_tokens)
        self.axial = AxialAttentionPool(d_model)

    def forward(self, x: torch.Tensor, forced_stride: float | None = None):
        cfg = self.cfg
        x = pad_short(x, cfg.min_length)
        t = x.shape[1]
        xp = self.conv(x)
        if forced_stride is None:
            stride = self.stride_learner(t)
        else:
            stride = torch.as_tensor(float(forced_stride), dtype=xp.dtype)
        bank = build_windows(t, stride, cfg.beta, cfg.k_min, cfg.k_max, exact=forced_stride)
        emb = self.axial(extract_patches(xp, bank))
        n_est = estimate_length(t, stride, cfg.clamp_sharpness)
        state = PatchingState(
            stride=stride,
            window_length=bank.width,
            n_estimate=n_est,
            n_windows=bank.n,
            taps=bank.k,
            stride_penalty=stride_penalty(stride, cfg.s_max, cfg.huber_delta),
            length_penalty=length_penalty(n_est, cfg.n_min, cfg.n_max, cfg.huber_delta),
            forced=forced_stride is not None,
        )
        return emb, state


def adaptive_patch(x: torch.Tensor, module: AdaptivePatching, forced_stride: float | None = None):
    return module(x, forced_stride)


def fixed_patch_baseline(x: torch.Tensor, t_thres: int = 200) -> torch.Tensor:
    """Rule-based downsampling: identity up to ``t_thres`` samples, otherwise
    non-overlapping means over r = ceil(T / t_thres) samples along axis -2.

    Block sums accumulate left to right, so results match a sequential loop exactly.
    """
    t = x.shape[-2]
    if t <= t_thres:
        return x
    r = -(-t // t_thres)
    n_out = -(-t // r)
    acc = x[..., 0::r, :]
    counts = torch.ones(n_out, dtype=x.dtype)
    for off in range(1, r):
        part = x[..., off::r, :]
        m = part.shape[-2]
        if m == n_out:
            acc = acc + part
        else:
            acc = torch.cat([acc[..., :m, :] + part, acc[..., m:, :]], dim=-2)
        counts[:m] += 1
    return acc / counts[:, None]


class FixedPatching(nn.Module):
    """Ablation baseline: rule-based downsampling, then one token per step."""

    def __init__(self, d_model: int, t_thres: int = 200, cfg: PatchingConfig | None = None):
        super().__init__()
        self.cfg = cfg or PatchingConfig()
        self.t_thres = t_thres
        self.conv = ChannelConv(d_model, self.cfg.kernel_size)
        self.axial = AxialAttentionPool(d_model)

    def forward(self, x: torch.Tensor, forced_stride: float | None = None):
        if forced_stride is not None:
            raise ContractError("fixed patching cannot follow a forced stride")
        x = pad_short(x, self.cfg.min_length)
        t = x.shape[1]
        xd = fixed_patch_baseline(x, self.t_thres)
        emb = self.axial(self.conv(xd).unsqueeze(2))
        zero = torch.zeros((), dtype=emb.dtype)
        ratio = torch.as_tensor(float(-(-t // self.t_thres)) if t > self.t_thres else 1.0, dtype=emb.dtype)
        state = PatchingState(
            stride=ratio,
            window_length=ratio,
            n_estimate=torch.as_tensor(float(emb.shape[1]), dtype=emb.dtype),
            n_windows=emb.shape[1],
            taps=1,
            stride_penalty=zero,
            length_penalty=zero,
        )
        return emb, state
