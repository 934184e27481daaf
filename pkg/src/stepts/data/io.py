"""Signal/feature blobs and the line-delimited dataset manifest.

Signal blob:  b"STEPSIG1", T u64, C u64, T*C f32 (time-major), little endian.
Feature blob: b"STEPFEA1", N u64, D u64, N*D f32, little endian.
Manifest:     ``manifest.jsonl``, one JSON object per sample.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

SIG_MAGIC = b"STEPSIG1"
FEA_MAGIC = b"STEPFEA1"
MANIFEST = "manifest.jsonl"


class FormatError(IOError):
    pass


class ValidationError(ValueError):
    pass


def _write_blob(path, magic: bytes, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise FormatError(f"blob payload must be 2-D, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<QQ", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_blob(path, magic: bytes) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:8] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {data[:8]!r}")
    if len(data) < 24:
        raise FormatError(f"{path}: truncated header")
    rows, cols = struct.unpack_from("<QQ", data, 8)
    need = 24 + 4 * rows * cols
    if len(data) != need:
        raise FormatError(f"{path}: expected {need} bytes for {rows}x{cols}, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=24).reshape(rows, cols).astype(np.float32)


def write_signal(path, x: np.ndarray) -> None:
    _write_blob(path, SIG_MAGIC, x)


def read_signal(path) -> np.ndarray:
    return _read_blob(path, SIG_MAGIC)


def write_features(path, f: np.ndarray) -> None:
    _write_blob(path, FEA_MAGIC, f)


def read_features(path) -> np.ndarray:
    return _read_blob(path, FEA_MAGIC)


@dataclass
class ManifestRecord:
    id: str
    path: str
    T: int
    C: int
    label: int
    domain: str
    split: str


def write_manifest(root, records: list[ManifestRecord]) -> Path:
    path = Path(root) / MANIFEST
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
    return path


def read_manifest(root) -> list[ManifestRecord]:
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FormatError(f"no manifest at {path}")
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(ManifestRecord(**json.loads(line)))
            except (TypeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad record ({exc})") from exc
    return out


def validate_manifest(root, records: list[ManifestRecord] | None = None, check_blobs: bool = True) -> list[ManifestRecord]:
    """Unique ids, disjoint splits, every blob present with the declared shape."""
    root = Path(root)
    records = read_manifest(root) if records is None else records
    seen = set()
    for r in records:
        if r.id in seen:
            raise ValidationError(f"duplicate sample id {r.id!r}")
        seen.add(r.id)
        blob = root / r.path
        if not blob.exists():
            raise ValidationError(f"sample {r.id!r}: missing blob {r.path}")
        if check_blobs:
            with open(blob, "rb") as fh:
                head = fh.read(24)
            if head[:8] != SIG_MAGIC or len(head) < 24:
                raise ValidationError(f"sample {r.id!r}: not a signal blob")
            t, c = struct.unpack_from("<QQ", head, 8)
            if (t, c) != (r.T, r.C):
                raise ValidationError(f"sample {r.id!r}: blob is {t}x{c}, manifest says {r.T}x{r.C}")
    return records
