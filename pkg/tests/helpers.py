"""Shared oracles for the unit and acceptance suites."""

import numpy as np
import torch

from dcaptcha.audio import AudioBuffer
from dcaptcha.features import FeatureSpec
from dcaptcha.models import ModelConfig, build_model, input_gradient, loss

COMBOS = [
    ("compact_conv", "lfcc"), ("compact_conv", "mfcc"), ("compact_conv", "spectrogram"),
    ("mlp", "lfcc"), ("mlp", "mfcc"), ("mlp", "spectrogram"),
    ("raw_conv", "raw"), ("gmm", "mfcc"),
]
CEPSTRAL = ("lfcc", "mfcc")


def relative_error(analytic, numeric, scale_floor):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), scale_floor)


def gradcheck_model(arch, frontend, n_coords=100, seed=0, n_samples=8000):
    """Max relative error of the input gradient against central differences."""
    rng = np.random.default_rng(seed)
    model = build_model(ModelConfig(arch, FeatureSpec(frontend), seed=seed, dtype="float64"))
    if arch == "gmm":
        with torch.no_grad():
            model.means.normal_(0, 3, generator=torch.Generator().manual_seed(seed))
            model.variances.uniform_(5, 50, generator=torch.Generator().manual_seed(seed + 1))
    x = 0.3 * np.sin(2 * np.pi * 310 * np.arange(n_samples) / 16000) \
        + 0.05 * rng.standard_normal(n_samples)
    buf = AudioBuffer(x)
    g = input_gradient(model, buf, 1)
    h = 1e-6
    worst = 0.0
    floor = 1e-3 * np.abs(g).max()
    for i in rng.choice(n_samples, n_coords, replace=False):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (loss(model, AudioBuffer(xp), 1) - loss(model, AudioBuffer(xm), 1)) / (2 * h)
        worst = max(worst, relative_error(g[i], fd, floor))
    return worst
