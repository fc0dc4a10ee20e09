"""Waveform container, WAV I/O, framing and PSD estimation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

SAMPLE_RATE = 16000
PSD_FLOOR = 1e-12
PSD_FLOOR_DB = 10.0 * np.log10(PSD_FLOOR)

_WINDOWS = ("hann", "hamming", "rectangular")


class AudioError(ValueError):
    """Base class for audio precondition failures."""


class UnsupportedFormatError(AudioError):
    pass


class MultiChannelError(AudioError):
    pass


class TruncatedFileError(AudioError):
    pass


class TooShortError(AudioError):
    pass


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Mono waveform at a fixed sample rate.

    Samples are stored as a read-only float64 array. Values outside
    [-1, 1] are allowed in memory (perturbations may overshoot during
    optimization); they are clamped only when written to disk.
    """

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(arr)):
            raise AudioError("samples must be finite")
        if int(self.sample_rate) <= 0:
            raise AudioError("sample_rate must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioBuffer":
        return AudioBuffer(samples, self.sample_rate)

    def __add__(self, other: "AudioBuffer") -> "AudioBuffer":
        if len(other) != len(self) or other.sample_rate != self.sample_rate:
            raise AudioError("buffers differ in length or sample rate")
        return self.with_samples(self.samples + other.samples)

    def scaled(self, c: float) -> "AudioBuffer":
        return self.with_samples(c * self.samples)


@dataclass(frozen=True)
class FrameSpec:
    frame_length: int = 2048
    hop_length: int = 512
    window: str = "hann"

    def __post_init__(self):
        n = self.frame_length
        if n <= 0 or n & (n - 1):
            raise ValueError(f"frame_length must be a power of two, got {n}")
        if not 0 < self.hop_length <= n:
            raise ValueError("hop_length must satisfy 0 < hop <= frame_length")
        if self.window not in _WINDOWS:
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.frame_length // 2 + 1


@dataclass(frozen=True, eq=False)
class PsdFrames:
    """PSD in dB, shape [frame, bin]; ``source_max`` is the global max."""

    values: np.ndarray
    frame_spec: FrameSpec
    source_max: float = field(default=float("nan"))

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != self.frame_spec.n_bins:
            raise ValueError("PSD values must be [frame, frame_length/2 + 1]")
        if not np.all(np.isfinite(v)):
            raise ValueError("PSD values must be finite")
        object.__setattr__(self, "values", v)
        if np.isnan(self.source_max):
            object.__setattr__(self, "source_max", float(v.max()))

    @property
    def shape(self):
        return self.values.shape


def read_wav(path) -> AudioBuffer:
    """Read a mono 16-bit PCM or 32-bit float WAV into [-1, 1] samples."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise UnsupportedFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise TruncatedFileError(f"{path}: fmt chunk truncated")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == 0xFFFE and len(body) >= 26:
                # WAVE_FORMAT_EXTENSIBLE: real tag is the subformat GUID prefix
                fmt = (struct.unpack_from("<H", body, 24)[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise TruncatedFileError(
                    f"{path}: data chunk declares {size} bytes, found {len(body)}"
                )
            payload = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise UnsupportedFormatError(f"{path}: missing fmt chunk")
    if payload is None:
        raise TruncatedFileError(f"{path}: missing data chunk")
    tag, channels, rate, _, _, bits = fmt
    if channels != 1:
        raise MultiChannelError(f"{path}: {channels} channels, expected mono")
    if tag == 1 and bits == 16:
        n = len(payload) // 2
        samples = np.frombuffer(payload[: 2 * n], dtype="<i2") / 32768.0
    elif tag == 3 and bits == 32:
        n = len(payload) // 4
        samples = np.frombuffer(payload[: 4 * n], dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormatError(f"{path}: format tag {tag} with {bits} bits")
    if len(payload) % (bits // 8):
        raise TruncatedFileError(f"{path}: partial trailing sample")
    return AudioBuffer(samples, rate)


def write_wav(buffer: AudioBuffer, path) -> None:
    """Write 16-bit PCM mono. Samples beyond [-1, 1] are clamped."""
    if len(buffer) == 0:
        raise AudioError("cannot write an empty buffer")
    clipped = np.clip(buffer.samples, -1.0, 1.0)
    pcm = np.clip(np.round(clipped * 32768.0), -32768, 32767).astype("<i2")
    raw = pcm.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(raw), b"WAVE",
        b"fmt ", 16, 1, 1, buffer.sample_rate, 2 * buffer.sample_rate, 2, 16,
        b"data", len(raw),
    )
    Path(path).write_bytes(header + raw)


def frames_count(buffer_length: int, spec: FrameSpec) -> int:
    if buffer_length < spec.frame_length:
        raise TooShortError(
            f"buffer of {buffer_length} samples is shorter than one frame "
            f"({spec.frame_length})"
        )
    return 1 + (buffer_length - spec.frame_length) // spec.hop_length


def frame_starts(buffer_length: int, spec: FrameSpec) -> np.ndarray:
    return np.arange(frames_count(buffer_length, spec)) * spec.hop_length


def window(name: str, length: int, dtype=torch.float64) -> torch.Tensor:
    if name == "hann":
        return torch.hann_window(length, periodic=True, dtype=dtype)
    if name == "hamming":
        return torch.hamming_window(length, periodic=True, dtype=dtype)
    return torch.ones(length, dtype=dtype)


def frame_signal(x: torch.Tensor, frame_length: int, hop_length: int) -> torch.Tensor:
    """[..., T] -> [..., frames, frame_length]; the partial tail is dropped."""
    return x.unfold(-1, frame_length, hop_length)


def power_spectrum(x: torch.Tensor, spec: FrameSpec) -> torch.Tensor:
    """Windowed |FFT|^2 per frame, differentiable. [..., T] -> [..., F, bins]."""
    frames_count(x.shape[-1], spec)
    win = window(spec.window, spec.frame_length, x.dtype)
    spectrum = torch.fft.rfft(frame_signal(x, spec.frame_length, spec.hop_length) * win)
    return spectrum.real**2 + spectrum.imag**2


def psd_db(x: torch.Tensor, spec: FrameSpec) -> torch.Tensor:
    return 10.0 * torch.log10(power_spectrum(x, spec) + PSD_FLOOR)


def psd_estimate(buffer: AudioBuffer, spec: FrameSpec = FrameSpec()) -> PsdFrames:
    x = torch.from_numpy(np.array(buffer.samples))
    with torch.no_grad():
        values = psd_db(x, spec).numpy()
    return PsdFrames(values, spec)


def bin_frequencies(spec: FrameSpec, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return np.arange(spec.n_bins) * sample_rate / spec.frame_length
