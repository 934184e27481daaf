"""Dataclass configs and INI round-tripping for run records."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .numeric import ContractError


@dataclass
class PatchingConfig:
    kernel_size: int = 5
    stride_hidden: int = 16
    beta: float = 2.0
    s_max: float = 400.0
    n_max: float = 200.0
    n_min: float = 5.0
    huber_delta: float = 1.0
    clamp_sharpness: float = 10.0
    k_min: int = 4
    k_max: int = 64
    min_length: int = 4
    # initial stride learner is fitted so that S(T) ~ T / (init_tokens + 1)
    init_tokens: int = 32


@dataclass
class EncoderConfig:
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    ffn_mult: int = 4
    max_positions: int = 256
    n_classes: int = 2
    head_hidden: tuple[int, int] = (64, 64)
    stats_token: bool = True
    fixed_patching: bool = False
    t_thres: int = 200
    patching: PatchingConfig = field(default_factory=PatchingConfig)

    def __post_init__(self):
        if isinstance(self.head_hidden, list):
            self.head_hidden = tuple(self.head_hidden)
        if isinstance(self.patching, dict):
            self.patching = PatchingConfig(**self.patching)
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_positions < self.patching.n_max + 1:
            raise ContractError("max_positions must be at least n_max + 1")

    @classmethod
    def desk(cls, **kw) -> "EncoderConfig":
        return cls(**{"d_model": 64, "n_blocks": 2, "n_heads": 4, **kw})

    @classmethod
    def full(cls, **kw) -> "EncoderConfig":
        return cls(**{"d_model": 768, "n_blocks": 17, "n_heads": 12, "head_hidden": (768, 768), **kw})

    @classmethod
    def tiny(cls, **kw) -> "EncoderConfig":
        return cls(**{"d_model": 8, "n_blocks": 1, "n_heads": 2, "head_hidden": (8, 8), **kw})


@dataclass
class TrainPlan:
    mode: str = "finetune"  # or "distill"
    steps: int = 3000
    batch_size: int = 32
    phase_boundaries: tuple[int, int] = (1000, 2000)
    lr: float = 3e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_steps: int = 0
    penalty_weight: float = 0.1
    seed: int = 0
    precision: str = "train"
    checkpoint_every: int = 0
    eval_every: int = 0
    teacher_weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.phase_boundaries = tuple(self.phase_boundaries)
        self.betas = tuple(self.betas)
        if not self.phase_boundaries[0] < self.phase_boundaries[1]:
            raise ContractError(f"phase boundaries must increase: {self.phase_boundaries}")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.mode not in ("finetune", "distill"):
            raise ContractError(f"unknown loss mode {self.mode!r}")


def _to_text(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, dict):
        return ",".join(f"{k}:{x}" for k, x in v.items())
    return str(v)


def _from_text(text: str, like):
    if isinstance(like, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ContractError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        cast = type(like[0]) if like else float
        return tuple(cast(p) for p in parts)
    if isinstance(like, dict):
        out = {}
        for item in filter(None, (p.strip() for p in text.split(","))):
            k, _, x = item.partition(":")
            out[k.strip()] = float(x)
        return out
    return text


def apply_section(obj, section: dict[str, str]):
    """Override dataclass fields from string values; unknown keys are rejected."""
    names = {f.name for f in dataclasses.fields(obj)}
    for key, text in section.items():
        if key not in names:
            raise ContractError(f"unknown config key {key!r} for {type(obj).__name__}")
        setattr(obj, key, _from_text(text, getattr(obj, key)))
    return obj


def flat_dict(obj) -> dict[str, str]:
    return {
        f.name: _to_text(getattr(obj, f.name))
        for f in dataclasses.fields(obj)
        if not dataclasses.is_dataclass(getattr(obj, f.name))
    }


def read_ini(path: str | Path) -> dict[str, dict[str, str]]:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    if not cp.read(path):
        raise FileNotFoundError(path)
    return {s: dict(cp[s]) for s in cp.sections()}


def write_ini(path: str | Path, sections: dict[str, dict[str, str]]) -> None:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    for name, values in sections.items():
        cp[name] = values
    with open(path, "w") as fh:
        cp.write(fh)
