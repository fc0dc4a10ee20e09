"""Synthetic challenge-task corpus.

Each task has a procedural generator producing "bona fide" clips. Fake
variants pass an independent render through a toy vocoder (spectral
smoothing plus partial phase randomization). Speaker profiles give every
clip a reproducible timbre so identity checks have something to compare.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer, write_wav

TASKS = ("sing", "hum_tone", "speak_emotion", "laugh", "domestic_sound")
SPLITS = (("train", 0.65), ("val", 0.15), ("test", 0.20))

VOWELS = (  # (F1, F2, F3) Hz
    (730, 1090, 2440), (530, 1840, 2480), (270, 2290, 3010),
    (570, 840, 2410), (300, 870, 2240), (660, 1720, 2410),
)


@dataclass(frozen=True)
class SpeakerProfile:
    """Timbre of one synthetic speaker: EQ curve, pitch and formant scaling."""

    eq_db: tuple  # gains at EQ_POINTS_HZ
    pitch_scale: float
    formant_scale: float
    breathiness: float

    @classmethod
    def draw(cls, rng: np.random.Generator, eq_range_db: float = 8.0) -> "SpeakerProfile":
        eq = rng.uniform(-eq_range_db, eq_range_db, len(EQ_POINTS_HZ))
        return cls(tuple(eq.round(3)),
                   float(rng.uniform(0.75, 1.35)), float(rng.uniform(0.85, 1.2)),
                   float(rng.uniform(0.02, 0.12)))

    def envelope(self, freqs) -> np.ndarray:
        """Linear gain at ``freqs`` (Hz)."""
        lf = np.log(np.maximum(freqs, 20.0))
        db = np.interp(lf, np.log(EQ_POINTS_HZ), self.eq_db)
        return 10.0 ** (db / 20.0)


EQ_POINTS_HZ = np.array([100.0, 300.0, 800.0, 1800.0, 3500.0, 6000.0, 8000.0])


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_per_task: int = 600  # clips per task, half bona fide and half fake
    duration_s: float = 2.0
    n_speakers: int = 12
    speaker_eq_db: float = 3.0
    sample_rate: int = SAMPLE_RATE
    noise_floor_db: tuple = (-50.0, -40.0)
    peak_range: tuple = (0.3, 0.8)
    vocoder_smoothing_bins: int = 9
    vocoder_phase_jitter: tuple = (0.6, 1.0)
    vocoder_tilt_db: tuple = (3.0, 5.0)  # high-frequency loss, dB per octave above 250 Hz
    vocoder_cutoff_hz: tuple | None = None  # optional band-limit, off by default
    tasks: tuple = TASKS

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCorpusSpec":
        d = dict(d)
        for k in ("noise_floor_db", "peak_range", "vocoder_phase_jitter",
                  "vocoder_cutoff_hz", "vocoder_tilt_db", "tasks"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# generators


def _formant_gain(freqs, formants, bandwidth=120.0):
    g = np.full_like(freqs, 0.05)
    for i, fc in enumerate(formants):
        g = g + (0.8**i) / (1.0 + ((freqs - fc) / bandwidth) ** 2)
    return g


def _harmonic(f0_track, sr, amp_fn, max_freq=7000.0):
    """Sum of harmonics of a time-varying f0; amp_fn(freq_track, h) -> amplitude."""
    phase = 2 * np.pi * np.cumsum(f0_track) / sr
    out = np.zeros_like(f0_track)
    h = 1
    while h * f0_track.min() < max_freq and h < 60:
        fh = h * f0_track
        out += np.where(fh < max_freq, amp_fn(fh, h), 0.0) * np.sin(h * phase)
        h += 1
    return out


def _smooth_env(n, sr, rng, attack=0.03, release=0.05):
    env = np.ones(n)
    a, r = int(attack * sr), int(release * sr)
    env[:a] = np.linspace(0, 1, a)
    if r:
        env[-r:] = np.minimum(env[-r:], np.linspace(1, 0, r))
    return env


def _bandpass_noise(n, rng, lo, hi, sr):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / sr)
    spec *= (f >= lo) & (f <= hi)
    x = np.fft.irfft(spec, n)
    return x / (np.std(x) + 1e-12)


def gen_sing(n, sr, rng, prof):
    n_notes = rng.integers(3, 6)
    base = rng.uniform(180, 420) * prof.pitch_scale
    bounds = np.sort(rng.choice(np.arange(1, n_notes * 4), n_notes - 1, replace=False))
    bounds = np.concatenate([[0], (bounds / (n_notes * 4) * n).astype(int), [n]])
    f0 = np.empty(n)
    for i in range(n_notes):
        f0[bounds[i]:bounds[i + 1]] = base * 2 ** (rng.integers(-5, 6) / 12)
    k = int(0.03 * sr)
    f0 = np.convolve(np.pad(f0, k, mode="edge"), np.ones(k) / k, "same")[k:-k]
    t = np.arange(n) / sr
    f0 = f0 * (1 + rng.uniform(0.02, 0.04) * np.sin(2 * np.pi * rng.uniform(5, 7) * t))
    vowel = np.array(VOWELS[rng.integers(len(VOWELS))]) * prof.formant_scale
    x = _harmonic(f0, sr, lambda fh, h: _formant_gain(fh, vowel) / h**0.8)
    return x * _smooth_env(n, sr, rng)


def gen_hum(n, sr, rng, prof):
    t = np.arange(n) / sr
    f0 = rng.uniform(100, 220) * prof.pitch_scale * 2 ** (rng.uniform(-2, 2) / 12 * t / t[-1])
    x = _harmonic(f0, sr, lambda fh, h: 1.0 / h**2.5 * (fh < 2500), 2500.0)
    return x * _smooth_env(n, sr, rng, 0.1, 0.1) * (1 + 0.1 * np.sin(2 * np.pi * 0.7 * t))


def gen_speak(n, sr, rng, prof):
    x = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.08) * sr)
    rise = rng.uniform(-0.4, 0.4)
    base = rng.uniform(90, 250) * prof.pitch_scale
    while pos < n - int(0.06 * sr):
        dur = min(int(rng.uniform(0.1, 0.2) * sr), n - pos)
        tt = np.linspace(0, 1, dur)
        f0 = base * (1 + rise * tt) * (1 + 0.05 * rng.standard_normal())
        vowel = np.array(VOWELS[rng.integers(len(VOWELS))]) * prof.formant_scale
        v = _harmonic(f0, sr, lambda fh, h: _formant_gain(fh, vowel, 90.0) / h**0.6)
        x[pos:pos + dur] += v * np.sin(np.pi * tt) ** 0.7
        pos += dur
        gap = int(rng.uniform(0.03, 0.08) * sr)
        if rng.random() < 0.5 and pos + gap < n:
            fric = _bandpass_noise(gap, rng, 3000, 7500, sr) * 0.15
            x[pos:pos + gap] += fric * np.hanning(gap)
        pos += gap
    return x


def gen_laugh(n, sr, rng, prof):
    x = np.zeros(n)
    rate = rng.uniform(4, 6)
    period = int(sr / rate)
    pos = int(rng.uniform(0.0, 0.1) * sr)
    amp = 1.0
    f0 = rng.uniform(200, 350) * prof.pitch_scale
    while pos < n - period // 2:
        dur = min(int(rng.uniform(0.08, 0.15) * sr), n - pos)
        tt = np.arange(dur) / sr
        breath = _bandpass_noise(dur, rng, 500, 3000, sr)
        voiced = _harmonic(np.full(dur, f0 * rng.uniform(0.9, 1.1)), sr,
                           lambda fh, h: 1.0 / h, 4000.0)
        burst = 0.6 * breath + 0.5 * voiced
        x[pos:pos + dur] += amp * burst * np.exp(-tt / 0.04) * (1 - np.exp(-tt / 0.005))
        amp *= rng.uniform(0.8, 1.0)
        pos += period + int(rng.uniform(-0.02, 0.02) * sr)
    return x


def gen_domestic(n, sr, rng, prof):
    x = np.zeros(n)
    for _ in range(rng.integers(2, 7)):
        pos = rng.integers(0, n - int(0.05 * sr))
        dur = min(int(rng.uniform(0.1, 0.4) * sr), n - pos)
        tt = np.arange(dur) / sr
        decay = rng.uniform(0.02, 0.15)
        ev = _bandpass_noise(dur, rng, 100, 7000, sr) * 0.4
        for _ in range(rng.integers(1, 4)):
            ev += np.sin(2 * np.pi * rng.uniform(200, 4000) * tt + rng.uniform(0, 6.28))
        x[pos:pos + dur] += rng.uniform(0.3, 1.0) * ev * np.exp(-tt / decay)
    return x


GENERATORS = {
    "sing": gen_sing,
    "hum_tone": gen_hum,
    "speak_emotion": gen_speak,
    "laugh": gen_laugh,
    "domestic_sound": gen_domestic,
}


def apply_profile(x, sr, prof: SpeakerProfile):
    spec = np.fft.rfft(x)
    spec *= prof.envelope(np.fft.rfftfreq(len(x), 1 / sr))
    return np.fft.irfft(spec, len(x))


def _pink(n, rng):
    spec = np.fft.rfft(rng.standard_normal(n))
    spec /= np.sqrt(np.maximum(np.arange(len(spec)), 1.0))
    x = np.fft.irfft(spec, n)
    return x / (np.std(x) + 1e-12)


def render(task: str, rng, prof: SpeakerProfile, spec: SyntheticCorpusSpec) -> np.ndarray:
    """One bona fide clip at a random peak level with a background noise floor."""
    n = int(round(spec.duration_s * spec.sample_rate))
    sr = spec.sample_rate
    x = GENERATORS[task](n, sr, rng, prof)
    x = apply_profile(x, sr, prof)
    x = x + prof.breathiness * np.std(x) * _bandpass_noise(n, rng, 1000, 6000, sr) * 0.3
    x = x / (np.max(np.abs(x)) + 1e-12)
    floor = 10 ** (rng.uniform(*spec.noise_floor_db) / 20)
    x = x + floor * (0.5 * _pink(n, rng) + 0.5 * rng.standard_normal(n))
    return x * rng.uniform(*spec.peak_range) / np.max(np.abs(x))


def toy_vocoder(x, rng, smoothing_bins=9, phase_jitter=0.8, cutoff_hz=None,
                tilt_db=0.0, sample_rate=SAMPLE_RATE, n_fft=512, hop=128):
    """Resynthesis artifacts: magnitude smoothed across frequency, phase
    jittered, a dull spectral tilt above 250 Hz and the band above
    ``cutoff_hz`` rolled off."""
    from scipy.signal import istft, stft

    peak = np.max(np.abs(x))
    f, _, Z = stft(x, fs=sample_rate, nperseg=n_fft, noverlap=n_fft - hop, boundary="even")
    mag = np.abs(Z)
    k = np.ones(smoothing_bins) / smoothing_bins
    mag = np.apply_along_axis(lambda c: np.convolve(c, k, "same"), 0, mag)
    if cutoff_hz is not None:
        mag *= (1.0 + (f / cutoff_hz) ** 16)[:, None] ** -0.5
    mag *= 10.0 ** (-tilt_db * np.log2(np.maximum(f, 250.0) / 250.0) / 20.0)[:, None]
    phase = np.angle(Z) + phase_jitter * rng.uniform(-np.pi, np.pi, Z.shape)
    _, y = istft(mag * np.exp(1j * phase), fs=sample_rate, nperseg=n_fft,
                 noverlap=n_fft - hop, boundary=True)
    y = y[: len(x)]
    if len(y) < len(x):
        y = np.pad(y, (0, len(x) - len(y)))
    return y * peak / (np.max(np.abs(y)) + 1e-12)


@dataclass
class Clip:
    task: str
    fake: bool
    split: str
    speaker: int
    index: int
    samples: np.ndarray = field(repr=False)

    @property
    def label(self) -> int:
        return int(self.fake)

    def buffer(self, sample_rate=SAMPLE_RATE) -> AudioBuffer:
        return AudioBuffer(self.samples, sample_rate)


@dataclass
class Corpus:
    spec: SyntheticCorpusSpec
    seed: int
    clips: list
    speakers: list

    def select(self, task=None, fake=None, split=None):
        return [c for c in self.clips
                if (task is None or c.task == task)
                and (fake is None or c.fake == fake)
                and (split is None or c.split in np.atleast_1d(split))]

    @staticmethod
    def matrix(clips) -> np.ndarray:
        return np.stack([c.samples for c in clips])


def split_counts(n: int):
    train = int(round(0.65 * n))
    val = int(round(0.15 * n))
    return {"train": train, "val": val, "test": n - train - val}


def generate(spec: SyntheticCorpusSpec, seed: int) -> Corpus:
    """Deterministic corpus: per task, ``n_per_task`` clips (half fake)."""
    root = np.random.SeedSequence(seed)
    spk_seq, *task_seqs = root.spawn(1 + len(spec.tasks))
    spk_rng = np.random.default_rng(spk_seq)
    speakers = [SpeakerProfile.draw(spk_rng, spec.speaker_eq_db)
                for _ in range(spec.n_speakers)]
    clips = []
    for task, seq in zip(spec.tasks, task_seqs):
        rng = np.random.default_rng(seq)
        n_fake = spec.n_per_task // 2
        n_real = spec.n_per_task - n_fake
        for fake, count in ((False, n_real), (True, n_fake)):
            splits = split_counts(count)
            names = [s for s, _ in SPLITS for _ in range(splits[s])]
            names = [names[i] for i in rng.permutation(count)]
            for i in range(count):
                spk = int(rng.integers(spec.n_speakers))
                x = render(task, rng, speakers[spk], spec)
                if fake:
                    cutoff = spec.vocoder_cutoff_hz
                    x = toy_vocoder(x, rng, spec.vocoder_smoothing_bins,
                                    rng.uniform(*spec.vocoder_phase_jitter),
                                    None if cutoff is None else rng.uniform(*cutoff),
                                    rng.uniform(*spec.vocoder_tilt_db), spec.sample_rate)
                clips.append(Clip(task, fake, names[i], spk, i, x))
    return Corpus(spec, seed, clips, speakers)


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """WAV tree plus ``manifest.json`` listing path, task, real/fake and split."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in corpus.clips:
        kind = "fake" if c.fake else "real"
        rel = Path(c.task) / kind / f"{c.index:05d}.wav"
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        write_wav(AudioBuffer(c.samples, corpus.spec.sample_rate), out / rel)
        entries.append({"path": rel.as_posix(), "task": c.task, "label": kind,
                        "split": c.split, "speaker": c.speaker})
    manifest = {"seed": corpus.seed, "spec": corpus.spec.to_dict(),
                "speakers": [asdict(s) for s in corpus.speakers], "clips": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path
