import struct

import numpy as np
import pytest
import torch

from dcaptcha.audio import (
    PSD_FLOOR_DB,
    AudioBuffer,
    AudioError,
    FrameSpec,
    MultiChannelError,
    TooShortError,
    TruncatedFileError,
    UnsupportedFormatError,
    frame_starts,
    frames_count,
    psd_estimate,
    read_wav,
    write_wav,
)


def _wav_bytes(payload: bytes, channels=1, rate=16000, tag=1, bits=16, declared=None):
    size = len(payload) if declared is None else declared
    block = channels * bits // 8
    return struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + size, b"WAVE", b"fmt ", 16,
                       tag, channels, rate, rate * block, block, bits, b"data", size) + payload


def test_silence_file(tmp_path):
    p = tmp_path / "s.wav"
    p.write_bytes(_wav_bytes(np.zeros(16000, "<i2").tobytes()))
    b = read_wav(p)
    assert len(b) == 16000 and b.sample_rate == 16000 and not b.samples.any()


def test_full_scale_sine(tmp_path):
    t = np.arange(16000) / 16000
    write_wav(AudioBuffer(np.sin(2 * np.pi * 440 * t)), tmp_path / "a.wav")
    peak = np.abs(read_wav(tmp_path / "a.wav").samples).max()
    assert 0.999 <= peak <= 1.0


def test_float32_read(tmp_path):
    x = np.linspace(-1, 1, 100).astype("<f4")
    p = tmp_path / "f.wav"
    p.write_bytes(_wav_bytes(x.tobytes(), tag=3, bits=32))
    assert np.array_equal(read_wav(p).samples, x.astype(np.float64))


def test_distinct_errors(tmp_path):
    p = tmp_path / "x.wav"
    p.write_bytes(_wav_bytes(np.zeros(20, "<i2").tobytes(), channels=2))
    with pytest.raises(MultiChannelError):
        read_wav(p)
    p.write_bytes(_wav_bytes(np.zeros(20, "<i2").tobytes(), declared=400))
    with pytest.raises(TruncatedFileError):
        read_wav(p)
    p.write_bytes(b"OggS" + bytes(40))
    with pytest.raises(UnsupportedFormatError):
        read_wav(p)
    p.write_bytes(_wav_bytes(np.zeros(20, "<i4").tobytes(), bits=32))
    with pytest.raises(UnsupportedFormatError):
        read_wav(p)


def test_round_trip_quantization(tmp_path, rng):
    b = AudioBuffer(rng.uniform(-1, 1, 5000))
    write_wav(b, tmp_path / "r.wav")
    assert np.abs(read_wav(tmp_path / "r.wav").samples - b.samples).max() <= 2**-15


def test_write_clamps_and_rejects_empty(tmp_path):
    write_wav(AudioBuffer([1.5, -2.0, 0.0]), tmp_path / "c.wav")
    s = read_wav(tmp_path / "c.wav").samples
    assert s[0] == pytest.approx(1.0, abs=2**-15) and s[1] == -1.0
    with pytest.raises(AudioError):
        write_wav(AudioBuffer(np.zeros(0)), tmp_path / "e.wav")


def test_buffer_invariants():
    with pytest.raises(AudioError):
        AudioBuffer([0.0, np.nan])
    with pytest.raises(AudioError):
        AudioBuffer([0.0], 0)
    b = AudioBuffer([2.0])  # overshoot allowed in memory
    assert b.samples[0] == 2.0


def test_frames_count():
    spec = FrameSpec(2048, 512)
    assert frames_count(16000, spec) == 28
    assert frames_count(2048, spec) == 1
    with pytest.raises(TooShortError):
        frames_count(2047, spec)
    starts = frame_starts(16000, spec)
    assert np.all(np.diff(starts) == 512) and starts[0] == 0


def test_frame_spec_invariants():
    with pytest.raises(ValueError):
        FrameSpec(1000, 100)
    with pytest.raises(ValueError):
        FrameSpec(1024, 2048)


def test_sine_peak_bin():
    t = np.arange(16000) / 16000
    psd = psd_estimate(AudioBuffer(np.sin(2 * np.pi * 1000 * t)), FrameSpec())
    assert np.all(psd.values.argmax(1) == 128)
    assert psd.shape == (28, 1025)


def test_zero_buffer_is_floor():
    psd = psd_estimate(AudioBuffer(np.zeros(4096)), FrameSpec())
    assert np.allclose(psd.values, PSD_FLOOR_DB)


def test_psd_shift_property(rng):
    # exact up to the additive floor: checked where both PSDs sit 70 dB above it
    x = AudioBuffer(rng.standard_normal(8000) * 0.1)
    base = psd_estimate(x).values
    for c in (2.0, 0.1, 10.0):
        scaled = psd_estimate(x.scaled(c)).values
        live = np.minimum(base, scaled) > PSD_FLOOR_DB + 70
        assert live.mean() > 0.5
        assert np.abs(scaled - base - 20 * np.log10(c))[live].max() < 1e-6
    assert psd_estimate(x).source_max == psd_estimate(x).values.max()


def test_psd_matches_numpy_oracle(rng):
    x = rng.standard_normal(4096)
    spec = FrameSpec(1024, 256)
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(1024) / 1024)  # periodic Hann
    frames = np.stack([x[i:i + 1024] * w for i in range(0, 4096 - 1024 + 1, 256)])
    oracle = 10 * np.log10(np.abs(np.fft.rfft(frames)) ** 2 + 1e-12)
    assert np.allclose(psd_estimate(AudioBuffer(x), spec).values, oracle, atol=1e-9)


def test_fft_round_trip(rng):
    frame = torch.as_tensor(rng.standard_normal((5, 2048)))
    back = torch.fft.irfft(torch.fft.rfft(frame), n=2048)
    assert float((back - frame).abs().max() / frame.abs().max()) < 1e-9
