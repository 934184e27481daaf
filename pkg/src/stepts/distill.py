"""Cross-domain multi-teacher feature distillation."""
from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .data.teachers import TeacherSpec, flatten_channels  # noqa: F401  (re-export)
from .numeric import ContractError


class AlignmentError(ValueError):
    """Student and teacher sequence lengths cannot be matched."""


class RoutingError(ValueError):
    pass


def forced_stride(length: int, n_teacher: int) -> float:
    """Stride whose length estimate T/S - 1 equals the teacher length."""
    if n_teacher < 1 or length < 2:
        raise ContractError(f"forced_stride needs N_t >= 1 and T >= 2, got T={length}, N_t={n_teacher}")
    s = length / (n_teacher + 1)
    if s <= 1.0:
        raise AlignmentError(f"teacher length {n_teacher} needs stride {s:.4g} <= 1 for T={length}")
    return s


def distill_loss(z_proj: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """MSE over the overlapping positions of (..., M, D_t) and (..., N_t, D_t)."""
    m, n = z_proj.shape[-2], target.shape[-2]
    if abs(m - n) > 1:
        raise AlignmentError(f"student length {m} and teacher length {n} differ by more than 1")
    if z_proj.shape[-1] != target.shape[-1]:
        raise ContractError(f"feature dims differ: {z_proj.shape[-1]} vs {target.shape[-1]}")
    k = min(m, n)
    return ((z_proj[..., :k, :] - target[..., :k, :]) ** 2).mean()


def combine_losses(per_teacher: Mapping[str, torch.Tensor | float], weights: Mapping[str, float] | None = None):
    if not per_teacher:
        raise ContractError("combine_losses needs at least one teacher loss")
    weights = weights or {}
    total = 0.0
    for tid in sorted(per_teacher):
        w = weights.get(tid, 1.0)
        total = total + (per_teacher[tid] if w == 1.0 else w * per_teacher[tid])
    return total


class ProjectionHeads(nn.ModuleDict):
    """One linear map D -> D_t per teacher; used only while distilling."""

    def __init__(self, d_model: int, teachers: Sequence[TeacherSpec]):
        super().__init__({t.teacher_id: nn.Linear(d_model, t.dim) for t in teachers})


class TeacherRegistry:
    def __init__(self, teachers: Sequence[TeacherSpec]):
        self.by_domain: dict[str, TeacherSpec] = {}
        for t in teachers:
            if t.domain in self.by_domain:
                raise ContractError(f"two teachers registered for domain {t.domain!r}")
            self.by_domain[t.domain] = t

    def route(self, tag: str) -> str:
        if tag not in self.by_domain:
            raise RoutingError(f"no teacher registered for domain {tag!r}")
        return self.by_domain[tag].teacher_id


def route_batch(tags: Sequence[str], registry: TeacherRegistry) -> list[str]:
    """Teacher id per sample; batches must be domain-homogeneous."""
    if len(set(tags)) > 1:
        raise RoutingError(f"mixed-domain batch: {sorted(set(tags))}")
    return [registry.route(t) for t in tags]


class RoundRobinLoader:
    """Cycle through domains in a fixed order, one homogeneous batch per step.

    Within a domain, sample order is a seed-derived permutation per epoch, so
    the batch at any step is a pure function of (seed, step).
    """

    def __init__(self, domains: Mapping[str, Sequence[int]], batch_size: int, seed: int = 0):
        if not domains:
            raise ContractError("loader needs at least one domain")
        self.domains = sorted(domains)
        self.pools = {d: np.asarray(domains[d]) for d in self.domains}
        self.batch_size = batch_size
        self.seed = seed

    def batch(self, step: int) -> tuple[str, np.ndarray]:
        d = self.domains[step % len(self.domains)]
        local = step // len(self.domains)
        return d, epoch_batch(self.pools[d], self.batch_size, local, self.seed + self.domains.index(d))


def epoch_batch(pool: np.ndarray, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for ``step`` when iterating ``pool`` in per-epoch shuffled order."""
    n = len(pool)
    per_epoch = max(1, n // batch_size)
    epoch, k = divmod(step, per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return pool[order[k * batch_size : (k + 1) * batch_size]]
