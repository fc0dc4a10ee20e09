"""
Where a perturbation can hide
=============================

Compute the global masking threshold of a voiced clip and compare two
perturbations of the same peak amplitude: white noise and the same noise
shaped to sit under the loud harmonics.
"""

import numpy as np

from dcaptcha.audio import AudioBuffer, FrameSpec, bin_frequencies
from dcaptcha.psychoacoustics import global_masking_threshold, perceptual_margin

rng = np.random.default_rng(0)
t = np.arange(16000) / 16000
voice = sum(np.sin(2 * np.pi * 200 * h * t) / h for h in range(1, 20))
voice = AudioBuffer(0.4 * voice / np.abs(voice).max())

spec = FrameSpec()
theta = global_masking_threshold(voice, spec)
freqs = bin_frequencies(spec)
print("threshold at 200 Hz / 4 kHz (dB):",
      theta.threshold.mean(0)[np.searchsorted(freqs, [200, 4000])].round(1))

# white noise at peak 0.004
white = rng.uniform(-1, 1, len(t))
white = 0.004 * white / np.abs(white).max()

# low-passed noise: energy moved toward the harmonics that mask it
shaped = np.convolve(rng.standard_normal(len(t)), np.ones(16) / 16, "same")
shaped = 0.004 * shaped / np.abs(shaped).max()

for name, d in (("white", white), ("shaped", shaped)):
    m = perceptual_margin(AudioBuffer(d), theta)
    print(f"{name:7s} violation fraction {m.violation_fraction:.3f}")
