"""Numeric substrate: precision control, reverse-mode gradients, a
finite-difference oracle, the Huber function and the checkpoint format.

Reverse-mode differentiation is torch autograd; everything that checks it
(``finite_diff_gradient``) only ever evaluates forward passes.
"""
from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
from torch import nn

CKPT_MAGIC = b"STEPCKPT"
CKPT_VERSION_F32 = 1
CKPT_VERSION_F64 = 2


class ContractError(ValueError):
    """A caller broke a documented precondition."""


class NumericError(RuntimeError):
    """Non-finite values or a failed numerical check."""


class CheckpointError(IOError):
    pass


def dtype_for(mode: str) -> torch.dtype:
    if mode in ("test", "float64", "f64", "64"):
        return torch.float64
    if mode in ("train", "float32", "f32", "32"):
        return torch.float32
    raise ContractError(f"unknown precision mode {mode!r}")


@contextlib.contextmanager
def precision(mode: str):
    """Temporarily switch torch's default float dtype ("test" = 64-bit)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype_for(mode))
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def huber(x, delta: float = 1.0):
    """0.5 x^2 inside |x| <= delta, delta (|x| - delta/2) outside."""
    if delta <= 0:
        raise ContractError(f"huber delta must be positive, got {delta}")
    if not torch.is_tensor(x):
        ax = abs(float(x))
        return 0.5 * ax * ax if ax <= delta else delta * (ax - 0.5 * delta)
    ax = x.abs()
    return torch.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))


def forward_backward(loss: torch.Tensor, leaves: Mapping[str, torch.Tensor] | Iterable[torch.Tensor]):
    """Gradients of a scalar ``loss`` w.r.t. each leaf that requires grad.

    Returns a dict keyed like ``leaves`` (names, or positions for a plain
    iterable). Leaves not reachable from ``loss`` get zero gradients.
    """
    if loss.numel() != 1:
        raise ContractError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite loss {loss.item()}")
    if isinstance(leaves, Mapping):
        items = [(k, v) for k, v in leaves.items() if v.requires_grad]
    else:
        items = [(i, v) for i, v in enumerate(leaves) if v.requires_grad]
    grads = torch.autograd.grad(loss.reshape(()), [v for _, v in items], allow_unused=True, retain_graph=True)
    out = {}
    for (k, v), g in zip(items, grads):
        g = torch.zeros_like(v) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for leaf {k!r}")
        out[k] = g
    return out


@contextlib.contextmanager
def nan_guard(model: nn.Module):
    """Raise NumericError naming the first submodule whose output is non-finite."""

    def make_hook(name):
        def hook(_mod, _inp, out):
            tensors = out if isinstance(out, (tuple, list)) else (out,)
            for t in tensors:
                if torch.is_tensor(t) and t.is_floating_point() and not torch.isfinite(t).all():
                    raise NumericError(f"non-finite output in node {name or type(model).__name__!r}")

        return hook

    handles = [m.register_forward_hook(make_hook(n)) for n, m in model.named_modules()]
    try:
        yield
    finally:
        for h in handles:
            h.remove()


def finite_diff_gradient(f: Callable[[torch.Tensor], torch.Tensor | float], x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences (f(x + h e_i) - f(x - h e_i)) / 2h, one coordinate at a time."""
    x = x.detach().clone()
    flat = x.reshape(-1)
    grad = torch.zeros_like(flat)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def rel_err(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-12) -> float:
    a = a.detach().reshape(-1).double()
    b = b.detach().reshape(-1).double()
    denom = max(a.norm().item(), b.norm().item(), floor)
    return (a - b).norm().item() / denom


# -- checkpoint format --------------------------------------------------------
#
# "STEPCKPT", u32 version, then records until EOF:
#   u32 name length, UTF-8 name, u32 rank, rank x u64 dims, values.
# Version 1 stores f32 values, version 2 stores f64 (exact 64-bit resume).


def save_checkpoint(path: str | Path, tensors: Mapping[str, torch.Tensor], version: int | None = None) -> None:
    if version is None:
        wide = any(t.dtype == torch.float64 for t in tensors.values())
        version = CKPT_VERSION_F64 if wide else CKPT_VERSION_F32
    if version not in (CKPT_VERSION_F32, CKPT_VERSION_F64):
        raise CheckpointError(f"unsupported checkpoint version {version}")
    np_dtype = "<f4" if version == CKPT_VERSION_F32 else "<f8"
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", version))
        for name, t in tensors.items():
            raw = name.encode("utf-8")
            arr = t.detach().cpu().numpy()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 12:
        raise CheckpointError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 8)
    if version == CKPT_VERSION_F32:
        np_dtype, width = "<f4", 4
    elif version == CKPT_VERSION_F64:
        np_dtype, width = "<f8", 8
    else:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: dict[str, torch.Tensor] = {}
    pos = 12
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = count * width
            if pos + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            arr = np.frombuffer(data, dtype=np_dtype, count=count, offset=pos).reshape(dims)
            pos += nbytes
            out[name] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc
    return out
