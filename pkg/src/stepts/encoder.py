"""Transformer encoder body, classification head and the assembled model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig
from .numeric import ContractError
from .patching import AdaptivePatching, FixedPatching, PatchingState
from .stats import StatsEncoder, inject_stats, normalize_per_channel


class ConvFrontend(nn.Module):
    """Two same-length kernel-3 convolutions over the token axis, GELU between."""

    def __init__(self, d_in: int, d_model: int):
        super().__init__()
        self.conv1 = nn.Conv1d(d_in, d_model, 3, padding=1)
        self.conv2 = nn.Conv1d(d_model, d_model, 3, padding=1)

    def forward(self, e: torch.Tensor) -> torch.Tensor:
        h = F.gelu(self.conv1(e.transpose(1, 2)))
        return self.conv2(h).transpose(1, 2)


class PositionalEmbedding(nn.Module):
    def __init__(self, max_positions: int, d_model: int):
        super().__init__()
        self.table = nn.Parameter(torch.empty(max_positions, d_model))
        nn.init.normal_(self.table, std=0.02)

    def forward(self, h):
        m = h.shape[1]
        if m > self.table.shape[0]:
            raise ContractError(
                f"sequence of {m} tokens exceeds max_positions={self.table.shape[0]}; "
                "the stride is too small for this input length"
            )
        return h + self.table[:m]


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.last_weights = None
        self.keep_weights = False

    def forward(self, x):
        b, m, d = x.shape
        q, k, v = self.qkv(x).reshape(b, m, 3, self.n_heads, d // self.n_heads).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d // self.n_heads), dim=-1)
        if self.keep_weights:
            self.last_weights = att.detach()
        y = (att @ v).transpose(1, 2).reshape(b, m, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, ffn_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, ffn_mult * d_model)
        self.ff2 = nn.Linear(ffn_mult * d_model, d_model)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ff2(F.gelu(self.ff1(self.ln2(x))))


class TransformerBody(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads, cfg.ffn_mult) for _ in range(cfg.n_blocks))
        self.ln_out = nn.LayerNorm(cfg.d_model)

    def forward(self, h):
        for blk in self.blocks:
            h = blk(h)
        return self.ln_out(h)


class Encoder(nn.Module):
    """conv frontend -> [stats token] -> positional table -> Transformer blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.frontend = ConvFrontend(cfg.d_model, cfg.d_model)
        self.positional = PositionalEmbedding(cfg.max_positions, cfg.d_model)
        self.body = TransformerBody(cfg)

    def forward(self, e, token=None):
        h = inject_stats(self.frontend(e), token)
        return self.body(self.positional(h))


class ClassifierHead(nn.Module):
    """Mean over tokens, then three linear layers with GELU between."""

    def __init__(self, d_model: int, n_classes: int, hidden: tuple[int, int] = (64, 64)):
        super().__init__()
        self.fc1 = nn.Linear(d_model, hidden[0])
        self.fc2 = nn.Linear(hidden[0], hidden[1])
        self.fc3 = nn.Linear(hidden[1], n_classes)

    def forward(self, z):
        h = z.mean(dim=1)
        return self.fc3(F.gelu(self.fc2(F.gelu(self.fc1(h)))))


def classify(z: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    if z.shape[1] < 1:
        raise ContractError("classify needs at least one token")
    return head(z)


@dataclass
class ModelOutput:
    logits: torch.Tensor  # (B, n_classes)
    tokens: torch.Tensor  # (B, M, D), stats token first when enabled
    state: PatchingState
    has_stats_token: bool

    @property
    def patch_tokens(self) -> torch.Tensor:
        """Encoder outputs aligned with patch embeddings (stats token dropped)."""
        return self.tokens[:, 1:] if self.has_stats_token else self.tokens


class StepModel(nn.Module):
    """Full model. Parameter groups for the freeze schedule: ``patching``
    (patching + statistics map), ``encoder`` and ``head``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.fixed_patching:
            self.patching = FixedPatching(cfg.d_model, cfg.t_thres, cfg.patching)
        else:
            self.patching = AdaptivePatching(cfg.d_model, cfg.patching)
        self.stats = StatsEncoder(cfg.d_model)
        self.encoder = Encoder(cfg)
        self.head = ClassifierHead(cfg.d_model, cfg.n_classes, cfg.head_hidden)

    def groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "patching": list(self.patching.parameters()) + list(self.stats.parameters()),
            "encoder": list(self.encoder.parameters()),
            "head": list(self.head.parameters()),
        }

    def group_of(self) -> dict[str, str]:
        out = {}
        for name, _ in self.named_parameters():
            top = name.split(".", 1)[0]
            out[name] = "patching" if top == "stats" else top
        return out

    def forward(self, x: torch.Tensor, forced_stride: float | None = None) -> ModelOutput:
        if x.dim() == 2:
            x = x.unsqueeze(0)
        xn, stats = normalize_per_channel(x)
        emb, state = self.patching(xn, forced_stride)
        token = self.stats(stats) if self.cfg.stats_token else None
        z = self.encoder(emb, token)
        return ModelOutput(self.head(z), z, state, self.cfg.stats_token)
