"""Synthetic heterogeneous signal families.

Each sample is a pure function of (spec, index): the generator seeds a fresh
``numpy.random.Generator`` from ``[spec.seed, index]``.

Families
--------
chirp        binary; class 1 carries a Hann-tapered linear chirp in noise
oscillation  k-class; one sinusoid whose frequency lies in band ``label``
phase        k-class, multi-channel; a shared sinusoid whose channel-to-channel
             phase lag encodes the class
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numeric import ContractError

DOMAINS = ("audio", "general-ts", "neural")
FAMILIES = ("chirp", "oscillation", "phase")
DEFAULT_DOMAIN = {"chirp": "audio", "oscillation": "general-ts", "phase": "neural"}


@dataclass
class SignalSpec:
    name: str = "chirp"
    family: str = "chirp"
    length_min: int = 512
    length_max: int = 512
    channels: int = 1
    n_classes: int = 2
    noise_sigma: float = 1.0
    snr_min: float = 1.0  # amplitude / noise_sigma
    snr_max: float = 2.0
    chirp_f0: tuple[float, float] = (0.02, 0.08)  # cycles per sample
    chirp_f1: tuple[float, float] = (0.12, 0.3)
    chirp_frac: tuple[float, float] = (0.3, 0.6)  # chirp duration / T
    freq_lo: float = 0.01
    freq_hi: float = 0.4
    log10_scale: tuple[float, float] = (0.0, 0.0)
    offset: tuple[float, float] = (0.0, 0.0)
    domain: str = ""
    seed: int = 0

    def __post_init__(self):
        for name in ("chirp_f0", "chirp_f1", "chirp_frac", "log10_scale", "offset"):
            setattr(self, name, tuple(getattr(self, name)))
        if not self.domain:
            self.domain = DEFAULT_DOMAIN.get(self.family, "")
        self.validate()

    def validate(self):
        if self.family not in FAMILIES:
            raise ContractError(f"unknown signal family {self.family!r}")
        if self.domain not in DOMAINS:
            raise ContractError(f"unknown domain tag {self.domain!r}")
        if not 1 <= self.length_min <= self.length_max:
            raise ContractError("need 1 <= length_min <= length_max")
        if self.channels < 1 or self.n_classes < 2:
            raise ContractError("need channels >= 1 and n_classes >= 2")
        if self.family == "chirp" and self.n_classes != 2:
            raise ContractError("chirp family is binary")
        if self.family == "phase" and self.channels < 2:
            raise ContractError("phase family needs at least 2 channels")


@dataclass
class SignalSample:
    id: str
    x: np.ndarray  # (T, C) float32
    label: int
    domain: str

    @property
    def length(self) -> int:
        return self.x.shape[0]

    @property
    def channels(self) -> int:
        return self.x.shape[1]


def _rng(spec: SignalSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index])


def _length(spec: SignalSpec, rng) -> int:
    if spec.length_min == spec.length_max:
        return spec.length_min
    lo, hi = math.log(spec.length_min), math.log(spec.length_max + 1)
    return min(spec.length_max, int(math.exp(rng.uniform(lo, hi))))


def class_bands(spec: SignalSpec) -> list[tuple[float, float]]:
    """Log-spaced frequency bands, each shrunk to its central 60% for separation."""
    edges = np.geomspace(spec.freq_lo, spec.freq_hi, spec.n_classes + 1)
    bands = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        llo, lhi = math.log(lo), math.log(hi)
        pad = 0.2 * (lhi - llo)
        bands.append((math.exp(llo + pad), math.exp(lhi - pad)))
    return bands


def class_lags(n_classes: int) -> np.ndarray:
    """Channel-to-channel phase lags in (0, pi), one per class."""
    return np.pi * (np.arange(n_classes) + 0.5) / n_classes


def _draw(spec: SignalSpec, index: int):
    """Shared random draws (order matters for determinism)."""
    rng = _rng(spec, index)
    length = _length(spec, rng)
    label = int(rng.integers(spec.n_classes))
    snr = rng.uniform(spec.snr_min, spec.snr_max)
    scale = 10.0 ** rng.uniform(*spec.log10_scale)
    offset = rng.uniform(*spec.offset, size=spec.channels)
    return rng, length, label, snr, scale, offset


def chirp_template(spec: SignalSpec, index: int) -> np.ndarray:
    """Unit-amplitude chirp waveform (T,) that sample ``index`` would carry."""
    rng, length, _, _, _, _ = _draw(spec, index)
    return _chirp(spec, rng, length)


def _chirp(spec: SignalSpec, rng, length: int) -> np.ndarray:
    dur = max(4, int(round(rng.uniform(*spec.chirp_frac) * length)))
    dur = min(dur, length)
    start = int(rng.integers(0, length - dur + 1))
    f0 = rng.uniform(*spec.chirp_f0)
    f1 = rng.uniform(*spec.chirp_f1)
    phi = rng.uniform(0, 2 * np.pi)
    t = np.arange(dur)
    rate = (f1 - f0) / max(dur - 1, 1)
    wave = np.sin(2 * np.pi * (f0 * t + 0.5 * rate * t * t) + phi) * np.hanning(dur)
    out = np.zeros(length)
    out[start : start + dur] = wave
    return out


def gen_signal(spec: SignalSpec, index: int) -> SignalSample:
    rng, length, label, snr, scale, offset = _draw(spec, index)
    sigma = spec.noise_sigma
    amp = snr * (sigma if sigma > 0 else 1.0)
    c = spec.channels
    t = np.arange(length)[:, None]
    if spec.family == "chirp":
        wave = _chirp(spec, rng, length)
        clean = np.repeat((amp * label * wave)[:, None], c, axis=1)
    elif spec.family == "oscillation":
        lo, hi = class_bands(spec)[label]
        f = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        phi = rng.uniform(0, 2 * np.pi, size=c)
        clean = amp * np.sin(2 * np.pi * f * t + phi)
    else:
        lo, hi = class_bands(spec)[0][0], class_bands(spec)[-1][1]
        f = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        phi0 = rng.uniform(0, 2 * np.pi)
        lag = class_lags(spec.n_classes)[label]
        clean = amp * np.sin(2 * np.pi * f * t + phi0 + lag * np.arange(c)[None, :])
    noise = rng.standard_normal((length, c)) * sigma
    x = scale * (clean + noise) + offset[None, :]
    return SignalSample(f"{spec.name}-{index:07d}", x.astype(np.float32), label, spec.domain)


def gen_many(spec: SignalSpec, indices) -> list[SignalSample]:
    return [gen_signal(spec, int(i)) for i in indices]


# -- family oracles ------------------------------------------------------------


def matched_filter_classify(spec: SignalSpec, sample: SignalSample, index: int) -> int:
    """Normalized correlation with the sample's own template, thresholded at
    half of its expected value for the weakest injected chirp."""
    h = chirp_template(spec, index)
    x = sample.x.astype(np.float64).mean(axis=1)
    x = x - x.mean()
    xn = float(np.linalg.norm(x))
    rho = float(x @ h) / (xn * float(np.linalg.norm(h))) if xn > 0 else 0.0
    sig = spec.snr_min * float(np.linalg.norm(h))
    expected = sig / math.sqrt(len(x) * spec.noise_sigma**2 / spec.channels + sig**2)
    return int(rho > 0.5 * expected)


def spectral_peak_classify(spec: SignalSpec, sample: SignalSample) -> int:
    x = sample.x.astype(np.float64)
    x = x - x.mean(axis=0)
    n = len(x)
    power = (np.abs(np.fft.rfft(x * np.hanning(n)[:, None], n=8 * n, axis=0)) ** 2).sum(axis=1)
    freqs = np.fft.rfftfreq(8 * n)
    f = freqs[int(np.argmax(power[1:])) + 1]
    bands = class_bands(spec)
    centers = np.array([math.sqrt(lo * hi) for lo, hi in bands])
    return int(np.argmin(np.abs(np.log(f) - np.log(centers))))


def phase_lag_classify(spec: SignalSpec, sample: SignalSample) -> int:
    x = sample.x.astype(np.float64)
    x = x - x.mean(axis=0)
    spec_x = np.fft.rfft(x * np.hanning(len(x))[:, None], axis=0)
    k = int(np.argmax((np.abs(spec_x) ** 2).sum(axis=1)[1:])) + 1
    z = spec_x[k]
    cross = np.sum(z[1:] * np.conj(z[:-1]))
    lag = float(np.angle(cross))
    return int(np.argmin(np.abs(class_lags(spec.n_classes) - lag)))
