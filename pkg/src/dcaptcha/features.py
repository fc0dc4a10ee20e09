"""Feature frontends: LFCC, MFCC, magnitude spectrogram and raw waveform.

One torch implementation serves both plain extraction and the
differentiable path, so forward values agree bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .audio import SAMPLE_RATE, AudioBuffer, TooShortError, frame_signal, window

KINDS = ("lfcc", "mfcc", "spectrogram", "raw")

LOG_FLOOR = 1e-10
PRE_EMPHASIS = 0.97

_DEFAULTS = {
    # analysis window 0.05 s, step 0.02 s, FFT 800, 10 cepstra
    "mfcc": {"win_s": 0.05, "hop_s": 0.02, "n_fft": 800, "n_filters": 26, "n_ceps": 10},
    "lfcc": {"win_s": 0.032, "hop_s": 0.016, "n_fft": 512, "n_filters": 20, "n_ceps": 20},
    "spectrogram": {"n_fft": 2048, "hop_length": 512},
    "raw": {},
}


@dataclass(frozen=True)
class FeatureSpec:
    kind: str
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        params = dict(_DEFAULTS[self.kind])
        unknown = set(self.parameters) - set(params)
        if unknown:
            raise ValueError(f"unknown {self.kind} parameters: {sorted(unknown)}")
        params.update(self.parameters)
        n_fft = params.get("n_fft")
        # the fixed MFCC FFT size (800) is not a power of two
        if n_fft is not None and self.kind != "mfcc" and n_fft & (n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {n_fft}")
        object.__setattr__(self, "parameters", params)

    @classmethod
    def default(cls, kind: str) -> "FeatureSpec":
        return cls(kind)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "parameters": dict(self.parameters)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        return cls(d["kind"], dict(d.get("parameters", {})))

    def window_samples(self, sample_rate: int = SAMPLE_RATE) -> int:
        p = self.parameters
        if self.kind in ("mfcc", "lfcc"):
            return int(round(p["win_s"] * sample_rate))
        if self.kind == "spectrogram":
            return p["n_fft"]
        return 1

    def hop_samples(self, sample_rate: int = SAMPLE_RATE) -> int:
        p = self.parameters
        if self.kind in ("mfcc", "lfcc"):
            return int(round(p["hop_s"] * sample_rate))
        if self.kind == "spectrogram":
            return p["hop_length"]
        return 1

    def n_frames(self, n_samples: int, sample_rate: int = SAMPLE_RATE) -> int:
        if self.kind == "raw":
            return 1
        win = self.window_samples(sample_rate)
        if n_samples < win:
            raise TooShortError(f"{n_samples} samples < analysis window {win}")
        return 1 + (n_samples - win) // self.hop_samples(sample_rate)

    def n_coefficients(self, n_samples: int | None = None) -> int:
        p = self.parameters
        if self.kind in ("mfcc", "lfcc"):
            return p["n_ceps"]
        if self.kind == "spectrogram":
            return p["n_fft"] // 2 + 1
        return n_samples


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray  # [frame, coefficient]
    spec: FeatureSpec
    backward: Callable[[np.ndarray], np.ndarray] | None = None

    @property
    def shape(self):
        return self.values.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def triangular_filterbank(edges_hz, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangles between consecutive edges, evaluated on FFT bin frequencies.

    Returns [n_bins, n_filters]."""
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges_hz[:-2], edges_hz[1:-1], edges_hz[2:]
    f = freqs[:, None]
    rising = (f - lo) / np.maximum(mid - lo, 1e-9)
    falling = (hi - f) / np.maximum(hi - mid, 1e-9)
    return np.clip(np.minimum(rising, falling), 0.0, None)


def mel_filterbank(n_filters: int, n_fft: int, sample_rate: int) -> np.ndarray:
    mels = np.linspace(0.0, hz_to_mel(sample_rate / 2), n_filters + 2)
    return triangular_filterbank(mel_to_hz(mels), n_fft, sample_rate)


def linear_filterbank(n_filters: int, n_fft: int, sample_rate: int) -> np.ndarray:
    return triangular_filterbank(
        np.linspace(0.0, sample_rate / 2, n_filters + 2), n_fft, sample_rate
    )


def dct_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Orthonormal DCT-II, [n_in, n_out]."""
    n = np.arange(n_in)[:, None]
    k = np.arange(n_out)[None, :]
    m = np.cos(math.pi / n_in * (n + 0.5) * k) * math.sqrt(2.0 / n_in)
    m[:, 0] /= math.sqrt(2.0)
    return m


_CACHE: dict = {}


def _constant(key, build, dtype):
    if key not in _CACHE:
        _CACHE[key] = torch.from_numpy(build())
    return _CACHE[key].to(dtype)


def pre_emphasis(x: torch.Tensor, coeff: float = PRE_EMPHASIS) -> torch.Tensor:
    return torch.cat([x[..., :1], x[..., 1:] - coeff * x[..., :-1]], dim=-1)


def _cepstral(x: torch.Tensor, spec: FeatureSpec, sample_rate: int) -> torch.Tensor:
    p = spec.parameters
    win = spec.window_samples(sample_rate)
    hop = spec.hop_samples(sample_rate)
    n_fft = p["n_fft"]
    frames = frame_signal(pre_emphasis(x), win, hop) * window("hann", win, x.dtype)
    spectrum = torch.fft.rfft(frames, n=n_fft)
    power = (spectrum.real**2 + spectrum.imag**2) / n_fft
    build = mel_filterbank if spec.kind == "mfcc" else linear_filterbank
    fb = _constant((spec.kind, p["n_filters"], n_fft, sample_rate),
                   lambda: build(p["n_filters"], n_fft, sample_rate), x.dtype)
    energies = torch.log(power @ fb + LOG_FLOOR)
    dct = _constant(("dct", p["n_filters"], p["n_ceps"]),
                    lambda: dct_matrix(p["n_filters"], p["n_ceps"]), x.dtype)
    return energies @ dct


def _spectrogram(x: torch.Tensor, spec: FeatureSpec) -> torch.Tensor:
    n_fft, hop = spec.parameters["n_fft"], spec.parameters["hop_length"]
    frames = frame_signal(x, n_fft, hop) * window("hann", n_fft, x.dtype)
    return torch.fft.rfft(frames).abs()


def extract_tensor(x: torch.Tensor, spec: FeatureSpec,
                   sample_rate: int = SAMPLE_RATE) -> torch.Tensor:
    """Batched frontend: [..., T] -> [..., frames, coefficients]."""
    spec.n_frames(x.shape[-1], sample_rate)
    if spec.kind == "raw":
        return x.unsqueeze(-2)
    if spec.kind == "spectrogram":
        return _spectrogram(x, spec)
    return _cepstral(x, spec, sample_rate)


def extract(buffer: AudioBuffer, spec: FeatureSpec) -> FeatureMatrix:
    x = torch.from_numpy(np.array(buffer.samples))
    with torch.no_grad():
        values = extract_tensor(x, spec, buffer.sample_rate)
    return FeatureMatrix(values.numpy(), spec)


def extract_differentiable(buffer: AudioBuffer, spec: FeatureSpec) -> FeatureMatrix:
    """Like :func:`extract`, plus a ``backward`` mapping dL/dfeatures to dL/dsamples."""
    x = torch.tensor(buffer.samples, requires_grad=True)
    out = extract_tensor(x, spec, buffer.sample_rate)

    def backward(grad_features: np.ndarray) -> np.ndarray:
        g = torch.as_tensor(np.array(grad_features, dtype=np.float64))
        (gx,) = torch.autograd.grad(out, x, grad_outputs=g, retain_graph=True)
        return gx.numpy()

    return FeatureMatrix(out.detach().numpy(), spec, backward)
