"""Global masking threshold and perceptual loss for imperceptible perturbations.

The threshold follows the classic simultaneous-masking recipe: tonal and
noise maskers are located on a normalized PSD, pruned, spread over the Bark
axis with a two-slope function and power-summed with the threshold in quiet.
All constants live in :mod:`dcaptcha.psychoacoustic_constants`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import psychoacoustic_constants as C
from .audio import (
    PSD_FLOOR,
    PSD_FLOOR_DB,
    AudioBuffer,
    FrameSpec,
    PsdFrames,
    bin_frequencies,
    power_spectrum,
    psd_estimate,
)


def hz_to_bark(f):
    f = np.asarray(f, dtype=np.float64)
    return 13.0 * np.arctan(0.00076 * f) + 3.5 * np.arctan((f / 7500.0) ** 2)


def absolute_threshold_db(f):
    """Threshold in quiet (dB SPL), clamped to the normalized range."""
    khz = np.asarray(f, dtype=np.float64) / 1000.0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        ath = (
            3.64 * khz**-0.8
            - 6.5 * np.exp(-0.6 * (khz - 3.3) ** 2)
            + 1e-3 * khz**4
        )
    ath = np.where(np.isfinite(ath), ath, C.ATH_MAX_DB)
    return np.clip(ath, C.ATH_MIN_DB, C.ATH_MAX_DB)


@dataclass(frozen=True, eq=False)
class MaskingThreshold:
    threshold: np.ndarray  # [frame, bin], dB
    source_max: float
    frame_spec: FrameSpec

    @property
    def shape(self):
        return self.threshold.shape


@dataclass(frozen=True, eq=False)
class PerceptualMargin:
    margin: np.ndarray
    violation_fraction: float


def _neighbourhood_bins(freqs, bin_hz):
    widths = np.empty_like(freqs)
    lower = -np.inf
    for upper, width in C.TONAL_NEIGHBOURHOOD_HZ:
        widths[(freqs >= lower) & (freqs < upper)] = width
        lower = upper
    return np.maximum(2, np.round(widths / bin_hz)).astype(int)


class _FrameModel:
    """Frequency-axis quantities shared by every frame of one FrameSpec."""

    def __init__(self, spec: FrameSpec, sample_rate: int):
        self.freqs = bin_frequencies(spec, sample_rate)
        self.bark = hz_to_bark(self.freqs)
        self.ath = absolute_threshold_db(self.freqs)
        self.reach = _neighbourhood_bins(self.freqs, sample_rate / spec.frame_length)
        n = len(self.freqs)
        edges = C.CRITICAL_BAND_EDGES_HZ
        band = np.searchsorted(edges, self.freqs, side="right") - 1
        band[0] = -1  # DC never forms a noise masker
        self.bands = [np.flatnonzero(band == b) for b in range(len(edges) - 1)]
        self.bands = [b for b in self.bands if len(b)]
        self.n_bins = n

    def maskers(self, p):
        """Return (bin, level_db, is_tonal) arrays for one normalized frame."""
        n = self.n_bins
        k = np.arange(1, n - 1)
        peak = k[(p[k] > p[k - 1]) & (p[k] > p[k + 1])]
        tonal = []
        for kk in peak:
            r = self.reach[kk]
            lo = p[max(kk - r, 0) : max(kk - 1, 0)]
            hi = p[kk + 2 : kk + r + 1]
            if np.all(p[kk] > lo + C.TONALITY_MARGIN_DB) and np.all(
                p[kk] > hi + C.TONALITY_MARGIN_DB
            ):
                tonal.append(kk)
        tonal = np.asarray(tonal, dtype=int)
        power = 10.0 ** (p / 10.0)
        bins, levels, is_tonal = [], [], []
        excluded = np.zeros(n, dtype=bool)
        for kk in tonal:
            bins.append(kk)
            levels.append(10.0 * np.log10(power[kk - 1 : kk + 2].sum()))
            is_tonal.append(True)
            r = self.reach[kk]
            excluded[max(kk - r, 0) : kk + r + 1] = True
        for members in self.bands:
            keep = members[~excluded[members]]
            if len(keep) == 0:
                continue
            total = power[keep].sum()
            centre = np.exp(np.mean(np.log(self.freqs[keep])))
            bins.append(int(keep[np.argmin(np.abs(self.freqs[keep] - centre))]))
            levels.append(10.0 * np.log10(total))
            is_tonal.append(False)
        bins = np.asarray(bins, dtype=int)
        levels = np.asarray(levels, dtype=np.float64)
        is_tonal = np.asarray(is_tonal, dtype=bool)
        audible = levels >= self.ath[bins]
        bins, levels, is_tonal = bins[audible], levels[audible], is_tonal[audible]
        # strongest-first pruning within the merge radius
        kept = []
        for i in np.argsort(-levels, kind="stable"):
            if all(abs(self.bark[bins[i]] - self.bark[bins[j]]) >= C.MASKER_PRUNE_BARK
                   for j in kept):
                kept.append(i)
        kept = np.asarray(sorted(kept), dtype=int)
        return bins[kept], levels[kept], is_tonal[kept]

    def spread(self, bins, levels, is_tonal):
        """Individual masking thresholds, shape [masker, bin]."""
        zm = self.bark[bins][:, None]
        dz = self.bark[None, :] - zm
        a, b = np.where(is_tonal[:, None], C.TONAL_INDEX[0], C.NOISE_INDEX[0]), np.where(
            is_tonal[:, None], C.TONAL_INDEX[1], C.NOISE_INDEX[1]
        )
        index = a + b * zm
        fm = np.maximum(self.freqs[bins], 1.0)[:, None]
        upper = np.maximum(
            0.0,
            C.UPPER_SLOPE_BASE_DB + C.UPPER_SLOPE_FREQ_HZ / fm
            - C.UPPER_SLOPE_LEVEL * levels[:, None],
        )
        sf = np.where(dz < 0, C.LOWER_SLOPE_DB * dz, -upper * dz)
        return levels[:, None] + index + sf

    def global_threshold(self, p):
        bins, levels, is_tonal = self.maskers(p)
        total = 10.0 ** (self.ath / 10.0)
        if len(bins):
            total = total + (10.0 ** (self.spread(bins, levels, is_tonal) / 10.0)).sum(0)
        return 10.0 * np.log10(total)


def normalize_psd(values: np.ndarray, source_max: float) -> np.ndarray:
    return C.REFERENCE_SPL_DB - source_max + values


def global_masking_threshold(
    original: AudioBuffer, spec: FrameSpec = FrameSpec()
) -> MaskingThreshold:
    """Masking threshold of ``original`` per frame and bin, in normalized dB.

    The PSD is shifted so the loudest bin of the whole signal sits at 96 dB;
    every frame is then analysed independently (no temporal masking).
    Digital silence has no maskers, so its threshold is the threshold in quiet.
    """
    psd = psd_estimate(original, spec)
    model = _FrameModel(spec, original.sample_rate)
    n_frames = psd.shape[0]
    if psd.source_max <= PSD_FLOOR_DB + 1e-9:
        theta = np.tile(model.ath, (n_frames, 1))
    else:
        p = normalize_psd(psd.values, psd.source_max)
        theta = np.stack([model.global_threshold(frame) for frame in p])
    return MaskingThreshold(theta, psd.source_max, spec)


def normalized_perturbation_psd(
    perturbation: AudioBuffer, original_max: float, spec: FrameSpec = FrameSpec(),
    original_length: int | None = None,
) -> PsdFrames:
    if original_length is not None and original_length != len(perturbation):
        raise ValueError(
            f"perturbation length {len(perturbation)} != original {original_length}"
        )
    psd = psd_estimate(perturbation, spec)
    return PsdFrames(normalize_psd(psd.values, original_max), spec, psd.source_max)


def _check_shape(perturbation: AudioBuffer, threshold: MaskingThreshold):
    from .audio import frames_count

    frames = frames_count(len(perturbation), threshold.frame_spec)
    if (frames, threshold.frame_spec.n_bins) != threshold.shape:
        raise ValueError(
            f"perturbation yields {frames} frames, threshold has {threshold.shape[0]}"
        )


def threshold_scale(theta_db, source_max) -> torch.Tensor:
    """Per-bin factor turning raw perturbation power into a masking ratio."""
    theta = torch.as_tensor(theta_db, dtype=torch.float64)
    smax = torch.as_tensor(source_max, dtype=torch.float64)
    if smax.ndim:
        smax = smax.reshape(-1, *([1] * (theta.ndim - 1)))
    return 10.0 ** ((C.REFERENCE_SPL_DB - smax - theta) / 10.0)


def perceptual_loss_tensor(delta: torch.Tensor, scale: torch.Tensor, spec: FrameSpec):
    """Mean hinge on the power ratio p̄_δ / θ over frames and bins.

    ``delta`` is [..., T]; ``scale`` comes from :func:`threshold_scale` and
    broadcasts against [..., frame, bin]. Returns one value per leading index.
    """
    power = power_spectrum(delta, spec) + PSD_FLOOR
    ratio = power * scale.to(power.dtype)
    return torch.relu(ratio - 1.0).mean(dim=(-2, -1))


def perceptual_loss(perturbation: AudioBuffer, threshold: MaskingThreshold) -> float:
    _check_shape(perturbation, threshold)
    delta = torch.from_numpy(np.array(perturbation.samples))
    scale = threshold_scale(threshold.threshold, threshold.source_max)
    with torch.no_grad():
        return float(perceptual_loss_tensor(delta, scale, threshold.frame_spec))


def perceptual_loss_gradient(
    perturbation: AudioBuffer, threshold: MaskingThreshold
) -> np.ndarray:
    _check_shape(perturbation, threshold)
    delta = torch.tensor(perturbation.samples, requires_grad=True)
    scale = threshold_scale(threshold.threshold, threshold.source_max)
    loss = perceptual_loss_tensor(delta, scale, threshold.frame_spec)
    (grad,) = torch.autograd.grad(loss, delta)
    return grad.numpy()


def perceptual_margin(
    perturbation: AudioBuffer, threshold: MaskingThreshold
) -> PerceptualMargin:
    _check_shape(perturbation, threshold)
    pbar = normalized_perturbation_psd(
        perturbation, threshold.source_max, threshold.frame_spec
    )
    margin = pbar.values - threshold.threshold
    return PerceptualMargin(margin, float(np.mean(margin > 0)))


def dump_csv(path, threshold: MaskingThreshold, margin: PerceptualMargin | None = None):
    """Write (frame, bin, threshold_db, margin_db) rows for plotting."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "bin", "threshold_db", "margin_db"])
        n_frames, n_bins = threshold.shape
        for f in range(n_frames):
            for b in range(n_bins):
                m = "" if margin is None else f"{margin.margin[f, b]:.6f}"
                w.writerow([f, b, f"{threshold.threshold[f, b]:.6f}", m])
