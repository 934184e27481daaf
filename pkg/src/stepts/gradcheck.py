"""Autograd-vs-finite-difference checks for every differentiable mechanism.

Each check draws random points at 64-bit precision, differentiates a scalar
function of (parameters, inputs) with ``forward_backward`` and compares
against ``finite_diff_gradient`` on the same function. Results report the
worst relative error per operation.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn
from torch.func import functional_call

from .config import EncoderConfig
from .distill import ProjectionHeads, distill_loss
from .data.teachers import TeacherSpec
from .encoder import ClassifierHead, ConvFrontend, StepModel, TransformerBody
from .numeric import finite_diff_gradient, forward_backward, precision, rel_err
from .patching import (
    AxialAttentionPool,
    StrideLearner,
    build_windows,
    channel_conv,
    estimate_length,
    extract_patches,
    length_penalty,
    n_windows,
    stride_penalty,
    taps_per_window,
)
from .stats import StatsEncoder, normalize_per_channel
from .training import weighted_ce

TOLERANCE = 1e-4
H = 1e-5


@dataclass
class CheckResult:
    op: str
    points: int
    worst: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.worst <= TOLERANCE


def flat_check(fn: Callable[..., torch.Tensor], tensors: list[torch.Tensor], h: float = H) -> float:
    """Relative error between autograd and central differences for
    ``fn(*tensors)`` w.r.t. all tensors jointly."""
    shapes = [t.shape for t in tensors]
    sizes = [t.numel() for t in tensors]
    theta = torch.cat([t.detach().reshape(-1) for t in tensors])

    def unflat(vec):
        return [p.reshape(s) for p, s in zip(vec.split(sizes), shapes)]

    leaves = [p.clone().requires_grad_(True) for p in unflat(theta)]
    g = forward_backward(fn(*leaves), leaves)
    analytic = torch.cat([g[i].reshape(-1) for i in range(len(leaves))])
    numeric = finite_diff_gradient(lambda v: fn(*unflat(v)), theta, h)
    return rel_err(analytic, numeric)


def module_check(module: nn.Module, loss: Callable, inputs: list[torch.Tensor], h: float = H) -> float:
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach() for _, p in module.named_parameters()]
    k = len(params)

    def fn(*parts):
        return loss(lambda *a: functional_call(module, dict(zip(names, parts[:k])), a), *parts[k:])

    return flat_check(fn, params + list(inputs), h)


def _randomize(module: nn.Module, gen: torch.Generator, scale: float = 0.5):
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    return module


def _readout(gen, shape):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


# -- per-operation checks ----------------------------------------------------------


def check_stride_learner(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    learner = _randomize(StrideLearner(16).double(), g, 0.3)
    t = int(math.exp(torch.empty(1, dtype=torch.float64).uniform_(math.log(16), math.log(1e5), generator=g)))
    return module_check(learner, lambda f: f(t), [])


def check_smooth_clamp(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    t = int(torch.randint(16, 5000, (1,), generator=g))
    # strides around and beyond the clamp knee (T/S - 1 near 1)
    s = torch.empty(1, dtype=torch.float64).uniform_(1.5, t / 1.5, generator=g)
    return flat_check(lambda s_: estimate_length(t, s_[0]), [s])


def check_penalties(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    learner = StrideLearner(16).double().zero_()
    with torch.no_grad():
        learner.fc1.weight.copy_(0.3 * torch.randn(16, 1, generator=g, dtype=torch.float64))
        learner.fc2.weight.copy_(0.3 * torch.randn(1, 16, generator=g, dtype=torch.float64))
        # log(S - 1) spread over both sides of log(S_max) and the length band
        learner.fc2.bias.fill_(float(torch.empty(1).uniform_(-1.0, 8.0, generator=g)))
    t = int(torch.randint(16, 100000, (1,), generator=g))

    def loss(f):
        s = f(t)
        return stride_penalty(s) + length_penalty(estimate_length(t, s)) + 0.01 * s

    return module_check(learner, loss, [])


def _stable_stride(t: int, g, lo=1.2, hi=None) -> float:
    """Draw S so that window and tap counts are constant within +-1e-4."""
    hi = hi or t / 3
    while True:
        s = float(torch.empty(1, dtype=torch.float64).uniform_(lo, hi, generator=g))
        ok = all(
            n_windows(t, s + d) == n_windows(t, s) and taps_per_window(2 * (s + d)) == taps_per_window(2 * s)
            for d in (-1e-4, 1e-4)
        )
        if ok:
            return s


def check_windowing(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    t, c, d = 30, 2, 4
    s = torch.tensor([_stable_stride(t, g, 1.2, 9.0)], dtype=torch.float64)
    xp = _readout(g, (1, t, c, d))
    probe = build_windows(t, float(s))
    r = _readout(g, (1, probe.n, probe.k, c, d))
    return flat_check(lambda s_, x_: (r * extract_patches(x_, build_windows(t, s_[0]))).sum(), [s, xp])


def check_channel_conv(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    w = _readout(g, (4, 1, 5))
    b = _readout(g, (4,))
    x = _readout(g, (1, 12, 3))
    r = _readout(g, (1, 12, 3, 4))
    return flat_check(lambda w_, b_, x_: (r * channel_conv(x_, w_, b_)).sum(), [w, b, x])


def check_axial_attention(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    mod = _randomize(AxialAttentionPool(6).double(), g, 0.4)
    x = _readout(g, (1, 3, 5, 3, 6))
    r = _readout(g, (1, 3, 6))
    return module_check(mod, lambda f, x_: (r * f(x_)).sum(), [x])


def check_conv_frontend(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    mod = _randomize(ConvFrontend(6, 6).double(), g, 0.4)
    x = _readout(g, (1, 7, 6))
    r = _readout(g, (1, 7, 6))
    return module_check(mod, lambda f, x_: (r * f(x_)).sum(), [x])


def check_transformer_block(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    mod = _randomize(TransformerBody(EncoderConfig.tiny()).double(), g, 0.4)
    x = _readout(g, (1, 4, 8))
    r = _readout(g, (1, 4, 8))
    return module_check(mod, lambda f, x_: (r * f(x_)).sum(), [x])


def check_stats_encoder(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    mod = _randomize(StatsEncoder(5).double(), g, 0.5)
    x = 3.0 * _readout(g, (1, 16, 3)) + 2.0
    r = _readout(g, (1, 5))

    def loss(f, x_):
        xn, st = normalize_per_channel(x_)
        return (r * f(st)).sum() + (xn**3).sum() * 0.1

    return module_check(mod, loss, [x])


class _Projected(nn.Module):
    def __init__(self, heads: ProjectionHeads, tid: str):
        super().__init__()
        self.heads = heads
        self.tid = tid

    def forward(self, z):
        return self.heads[self.tid](z)


def check_projection(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    heads = ProjectionHeads(6, [TeacherSpec("t", "audio", 4, 16)]).double()
    mod = _randomize(_Projected(heads, "t"), g, 0.5)
    z = _readout(g, (2, 9, 6))
    target = _readout(g, (2, 8, 4))
    return module_check(mod, lambda f, z_: distill_loss(f(z_), target), [z])


def check_weighted_ce(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    logits = 2.0 * _readout(g, (6, 4))
    labels = torch.randint(0, 4, (6,), generator=g)
    w = torch.rand(4, generator=g, dtype=torch.float64) + 0.5
    return flat_check(lambda l_: weighted_ce(l_, labels, w), [logits])


def check_head(seed: int) -> float:
    g = torch.Generator().manual_seed(seed)
    mod = _randomize(ClassifierHead(6, 3, (5, 5)).double(), g, 0.5)
    z = _readout(g, (2, 4, 6))
    labels = torch.randint(0, 3, (2,), generator=g)
    return module_check(mod, lambda f, z_: weighted_ce(f(z_), labels), [z])


def check_end_to_end(seed: int, length: int = 64, channels: int = 2) -> float:
    """All parameters of a tiny full model at once (stats token, adaptive patching)."""
    g = torch.Generator().manual_seed(seed)
    cfg = EncoderConfig.tiny(n_classes=3)
    torch.manual_seed(seed)
    model = StepModel(cfg).double()
    with torch.no_grad():
        model.encoder.positional.table.normal_(0.0, 0.1, generator=g)
    x = _readout(g, (1, length, channels)) * 2 + 1
    labels = torch.randint(0, 3, (1,), generator=g)
    s = float(model.patching.stride_learner(length))
    # keep counts constant under the perturbation; nudge the output bias otherwise
    while n_windows(length, s * (1 - 1e-3)) != n_windows(length, s * (1 + 1e-3)) or taps_per_window(
        2 * s * (1 - 1e-3)
    ) != taps_per_window(2 * s * (1 + 1e-3)):
        with torch.no_grad():
            model.patching.stride_learner.fc2.bias += 0.01
        s = float(model.patching.stride_learner(length))

    def loss(f, x_):
        out = f(x_)
        return weighted_ce(out.logits, labels) + 0.1 * out.state.penalty

    return module_check(model, loss, [x])


CHECKS: dict[str, tuple[str, Callable[[int], float]]] = {
    "stride_learner": ("patching", check_stride_learner),
    "smooth_length_clamp": ("patching", check_smooth_clamp),
    "penalties": ("patching", check_penalties),
    "gaussian_windowing": ("patching", check_windowing),
    "channel_conv": ("patching", check_channel_conv),
    "axial_attention": ("patching", check_axial_attention),
    "stats_encoder": ("patching", check_stats_encoder),
    "conv_frontend": ("encoder", check_conv_frontend),
    "transformer_block": ("encoder", check_transformer_block),
    "classifier_head": ("encoder", check_head),
    "weighted_ce": ("encoder", check_weighted_ce),
    "projection": ("distill", check_projection),
}


def run_checks(scope: str = "all", points: int = 20, seed: int = 0) -> list[CheckResult]:
    if scope not in ("all", "patching", "encoder", "distill"):
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    results = []
    with precision("test"):
        for name, (group, fn) in CHECKS.items():
            if scope != "all" and group != scope:
                continue
            t0 = time.perf_counter()
            worst = max(fn(seed * 1000 + i) for i in range(points))
            results.append(CheckResult(name, points, worst, time.perf_counter() - t0))
    return results
