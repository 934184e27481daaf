"""Deterministic frozen stand-in teachers and the teacher feature store."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..numeric import ContractError
from .io import read_features, write_features


class TeacherInputError(ValueError):
    pass


@dataclass
class TeacherSpec:
    teacher_id: str
    domain: str
    dim: int
    length_divisor: int  # N_t = max(1, floor(T / length_divisor))
    max_length: int = 0  # 0 = unlimited
    truncate: bool = False
    multichannel: bool = False
    seed: int = 0
    hidden: int = 32

    def __post_init__(self):
        if self.dim < 1 or self.length_divisor < 1:
            raise ContractError("teacher dim and length divisor must be >= 1")

    def n_out(self, length: int) -> int:
        return max(1, length // self.length_divisor)

    def input_length(self, length: int, channels: int = 1) -> int:
        """Length of the sequence the teacher actually consumes."""
        n = length if self.multichannel else length * channels
        if self.max_length and n > self.max_length and self.truncate:
            n = self.max_length
        return n

    def to_json(self) -> dict:
        return {**asdict(self), "length_rule": f"T/{self.length_divisor}"}

    @classmethod
    def from_json(cls, obj: dict) -> "TeacherSpec":
        obj = dict(obj)
        obj.pop("length_rule", None)
        return cls(**obj)


PRESETS = {
    "audio-like": TeacherSpec("audio-like", "audio", 48, 16, seed=101),
    "ts-like": TeacherSpec("ts-like", "general-ts", 32, 8, max_length=2048, truncate=True, seed=202),
    "neural-like": TeacherSpec("neural-like", "neural", 64, 32, multichannel=True, seed=303),
}


def preset(name: str, **overrides) -> TeacherSpec:
    if name not in PRESETS:
        raise ContractError(f"unknown teacher preset {name!r}; choose from {sorted(PRESETS)}")
    return TeacherSpec(**{**asdict(PRESETS[name]), **overrides})


def flatten_channels(x: np.ndarray | torch.Tensor):
    """(T, C) -> (T*C, 1) with output[t*C + c] = x[t, c]."""
    return x.reshape(-1, 1)


class FrozenTeacher:
    """Two valid-padded strided convolutions (tanh between), then adaptive
    average pooling to exactly N_t rows. Parameters are drawn once from the
    seed and never updated."""

    K1, S1, K2, S2 = 8, 4, 4, 2

    def __init__(self, spec: TeacherSpec):
        self.spec = spec
        g = torch.Generator().manual_seed(spec.seed)
        h = spec.hidden
        self.w1 = torch.randn(h, 1, self.K1, generator=g, dtype=torch.float64) / math.sqrt(self.K1)
        self.b1 = 0.1 * torch.randn(h, generator=g, dtype=torch.float64)
        self.w2 = torch.randn(spec.dim, h, self.K2, generator=g, dtype=torch.float64) / math.sqrt(h * self.K2)
        self.b2 = 0.1 * torch.randn(spec.dim, generator=g, dtype=torch.float64)
        self.min_len = self.K1 + self.S1 * (self.K2 - 1)

    def prepare(self, x: np.ndarray) -> np.ndarray:
        """Flatten (1-D teachers) and apply the length cap."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if not self.spec.multichannel:
            x = flatten_channels(x)
        cap = self.spec.max_length
        if cap and x.shape[0] > cap:
            if not self.spec.truncate:
                raise TeacherInputError(f"{self.spec.teacher_id}: input length {x.shape[0]} exceeds max {cap}")
            x = x[:cap]
        return x

    def _features(self, x: torch.Tensor) -> torch.Tensor:
        """(T, C) float64 -> (L', D_t), averaged over channels."""
        t = x.shape[0]
        if t < self.min_len:
            x = F.pad(x, (0, 0, 0, self.min_len - t))
        h = torch.tanh(F.conv1d(x.T.unsqueeze(1), self.w1, self.b1, stride=self.S1))
        f = F.conv1d(h, self.w2, self.b2, stride=self.S2)  # (C, D_t, L')
        return f.mean(dim=0).T

    def __call__(self, x: np.ndarray, n_out: int | None = None) -> np.ndarray:
        xp = self.prepare(x)
        n = self.spec.n_out(xp.shape[0]) if n_out is None else n_out
        with torch.no_grad():
            f = self._features(torch.from_numpy(np.ascontiguousarray(xp)))
            out = F.adaptive_avg_pool1d(f.T.unsqueeze(0), n)[0].T
        return out.numpy()

    def lipschitz_bound(self, length: int, channels: int = 1) -> float:
        """Upper bound on ||F(X) - F(X')|| / ||X - X'|| for inputs of this shape."""
        t = self.spec.input_length(length, channels)
        n = self.spec.n_out(t)
        c1 = torch.linalg.matrix_norm(self.w1.reshape(self.w1.shape[0], -1), ord=2).item()
        c2 = torch.linalg.matrix_norm(self.w2.reshape(self.w2.shape[0], -1), ord=2).item()
        c1 *= math.sqrt(math.ceil(self.K1 / self.S1))
        c2 *= math.sqrt(math.ceil(self.K2 / self.S2))
        lp = (max(t, self.min_len) - self.K1) // self.S1 + 1
        lf = (lp - self.K2) // self.S2 + 1
        pool = F.adaptive_avg_pool1d(torch.eye(lf, dtype=torch.float64).unsqueeze(0), n)[0]
        cp = torch.linalg.matrix_norm(pool, ord=2).item()
        return c1 * c2 * cp


def frozen_teacher(x: np.ndarray, spec: TeacherSpec) -> np.ndarray:
    return FrozenTeacher(spec)(x)


# -- feature store -----------------------------------------------------------


def write_feature_store(out_dir, spec: TeacherSpec, features: dict[str, np.ndarray]) -> Path:
    root = Path(out_dir) / spec.teacher_id
    (root / "features").mkdir(parents=True, exist_ok=True)
    for sid, f in features.items():
        write_features(root / "features" / f"{sid}.fea", f)
    (root / "teacher.json").write_text(json.dumps(spec.to_json(), indent=2, sort_keys=True))
    return root


def read_teacher_spec(teacher_dir) -> TeacherSpec:
    return TeacherSpec.from_json(json.loads((Path(teacher_dir) / "teacher.json").read_text()))


def read_feature_store(teacher_dir) -> tuple[TeacherSpec, dict[str, np.ndarray]]:
    root = Path(teacher_dir)
    spec = read_teacher_spec(root)
    feats = {p.stem: read_features(p) for p in sorted((root / "features").glob("*.fea"))}
    for sid, f in feats.items():
        if f.shape[1] != spec.dim:
            raise ContractError(f"{root}: feature {sid} has dim {f.shape[1]}, teacher declares {spec.dim}")
    return spec, feats
