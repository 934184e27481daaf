"""In-memory sample collections and on-disk dataset generation."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .io import ManifestRecord, read_manifest, read_signal, validate_manifest, write_manifest, write_signal
from .synth import SignalSample, SignalSpec, gen_signal


@dataclass
class SignalSet:
    samples: list[SignalSample]

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def class_counts(self, n_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)

    def groups(self, indices) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Split ``indices`` into equal-length groups of (idx, x (B,T,C), labels)."""
        by_len = defaultdict(list)
        for i in indices:
            by_len[self.samples[i].x.shape].append(int(i))
        out = []
        for shape in sorted(by_len):
            idx = np.array(by_len[shape])
            xs = np.stack([self.samples[i].x for i in idx])
            out.append((idx, xs, np.array([self.samples[i].label for i in idx])))
        return out

    @classmethod
    def generate(cls, spec: SignalSpec, start: int, count: int) -> "SignalSet":
        return cls([gen_signal(spec, i) for i in range(start, start + count)])


def write_dataset(spec: SignalSpec, out_dir, n_train: int, n_val: int) -> list[ManifestRecord]:
    """Indices [0, n_train) form the train split, the next n_val validation."""
    out = Path(out_dir)
    (out / "blobs").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_train + n_val):
        s = gen_signal(spec, i)
        rel = f"blobs/{s.id}.sig"
        write_signal(out / rel, s.x)
        split = "train" if i < n_train else "val"
        records.append(ManifestRecord(s.id, rel, s.length, s.channels, s.label, s.domain, split))
    write_manifest(out, records)
    return records


def load_split(root, split: str | None = None) -> SignalSet:
    root = Path(root)
    records = validate_manifest(root)
    samples = [
        SignalSample(r.id, read_signal(root / r.path), r.label, r.domain)
        for r in records
        if split is None or r.split == split
    ]
    return SignalSet(samples)


def split_names(root) -> list[str]:
    return sorted({r.split for r in read_manifest(root)})
