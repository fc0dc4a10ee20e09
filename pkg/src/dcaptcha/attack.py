"""Adversarial perturbations against a differentiable detector.

Stage 1 drives the surrogate to the target label with clipped sign steps.
Stage 2 continues with plain gradient descent on the detector loss plus the
weighted masking loss and returns the least audible iterate that still
carries the target label. :func:`pgd_attack` is the untargeted projected
attack used for adversarial training and robustness evaluation.

Batched entry points (``*_batch``) treat every row independently; the
single-buffer functions are thin wrappers around them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .audio import PSD_FLOOR, AudioBuffer, power_spectrum
from .models import REAL, Prediction, loss_tensor
from .psychoacoustics import (
    MaskingThreshold,
    PerceptualMargin,
    perceptual_loss_tensor,
    perceptual_margin,
    threshold_scale,
)


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.01
    lr_stage1: float = 1e-3
    lr_stage2: float = 1e-2
    alpha: float = 0.05
    stage1_iters: int = 200
    stage2_iters: int = 1000
    alpha_adapt: str = "increase_on_success"
    target_label: int = REAL
    confidence_threshold: float = 0.9
    alpha_patience: int = 50
    alpha_growth: float = 1.2
    loss_kind: str = "cross_entropy"
    stage2_step_cap: float | None = 1e-3  # max |step| per sample per iteration

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.alpha_adapt not in ("fixed", "increase_on_success"):
            raise ValueError(f"unknown alpha_adapt {self.alpha_adapt!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class AttackResult:
    adversarial: AudioBuffer
    perturbation: AudioBuffer
    stage1_success: bool
    final_prediction: Prediction
    surrogate_confidence: float
    perceptual: PerceptualMargin | None
    loss_trace: list = field(default_factory=list)  # (L_net, L_theta) per iteration
    best_index: int = 0


@dataclass(eq=False)
class AttackBatch:
    """Row-aligned results of a batched attack."""

    inputs: np.ndarray
    perturbation: np.ndarray
    stage1_success: np.ndarray
    probabilities: np.ndarray  # surrogate probabilities at the returned iterate
    violation_fraction: np.ndarray  # nan where no threshold was supplied
    target_label: int
    stage2_applied: np.ndarray = None
    best_index: np.ndarray = None
    trace: np.ndarray = None  # [B, iters + 1, 2]

    @property
    def adversarial(self) -> np.ndarray:
        return self.inputs + self.perturbation

    @property
    def confidence(self) -> np.ndarray:
        """Surrogate probability of the target label."""
        return self.probabilities[:, self.target_label]

    @property
    def success(self) -> np.ndarray:
        return self.probabilities.argmax(-1) == self.target_label

    def __len__(self):
        return len(self.inputs)


def _model_dtype(model):
    return next(iter(model.state_dict().values())).dtype


def _net_loss(model, X, delta, labels, loss_kind):
    logits = model((X + delta).to(_model_dtype(model)))
    return loss_tensor(logits, labels, loss_kind), torch.softmax(
        logits.detach().to(torch.float64), -1
    )


def stage1_batch(surrogate, X, config: AttackConfig):
    """Clipped sign descent toward the target label, from delta = 0.

    A row stops updating once its target-label probability reaches
    ``config.confidence_threshold``. Returns (delta, probabilities).
    """
    X = torch.as_tensor(np.array(X), dtype=torch.float64)
    delta = torch.zeros_like(X)
    labels = torch.full((len(X),), config.target_label, dtype=torch.long)
    eps, lr = config.epsilon, config.lr_stage1
    probs = None
    for _ in range(config.stage1_iters):
        d = delta.clone().requires_grad_(True)
        per_example, probs = _net_loss(surrogate, X, d, labels, config.loss_kind)
        active = probs[:, config.target_label] < config.confidence_threshold
        if not bool(active.any()):
            break
        (grad,) = torch.autograd.grad(per_example.sum(), d)
        step = torch.clamp(delta - lr * torch.sign(grad), -eps, eps)
        delta = torch.where(active[:, None], step, delta)
    with torch.no_grad():
        _, probs = _net_loss(surrogate, X, delta, labels, config.loss_kind)
    return delta.numpy(), probs.numpy()


def thresholds_tensor(thresholds):
    theta = np.stack([t.threshold for t in thresholds])
    smax = np.array([t.source_max for t in thresholds])
    return threshold_scale(theta, smax), thresholds[0].frame_spec


def stage2_batch(surrogate, X, delta0, thresholds, config: AttackConfig):
    """Joint descent on L_net + alpha * L_theta; best-iterate selection.

    Every row of ``delta0`` must already carry the target label. Among the
    iterates (including the seed) that keep the target label, the one with
    the smallest violation fraction wins; ties go to the smaller L_theta.
    Returns (delta, probabilities, violation_fraction, best_index, trace).
    """
    X = torch.as_tensor(np.array(X), dtype=torch.float64)
    delta = torch.as_tensor(np.array(delta0), dtype=torch.float64).clone()
    B = len(X)
    labels = torch.full((B,), config.target_label, dtype=torch.long)
    scale, spec = thresholds_tensor(thresholds)
    alpha = torch.full((B,), float(config.alpha), dtype=torch.float64)
    streak = torch.zeros(B, dtype=torch.long)
    best_delta = delta.clone()
    best_key = torch.full((B, 2), np.inf, dtype=torch.float64)
    best_index = torch.zeros(B, dtype=torch.long)
    best_probs = torch.zeros(B, surrogate.config.class_count, dtype=torch.float64)
    trace = np.zeros((B, config.stage2_iters + 1, 2))
    for it in range(config.stage2_iters + 1):
        d = delta.clone().requires_grad_(True)
        net, probs = _net_loss(surrogate, X, d, labels, config.loss_kind)
        ratio = (power_spectrum(d, spec) + PSD_FLOOR) * scale
        theta_loss = torch.relu(ratio - 1.0).mean(dim=(-2, -1))
        trace[:, it, 0] = net.detach().to(torch.float64).numpy()
        trace[:, it, 1] = theta_loss.detach().numpy()
        with torch.no_grad():
            on_target = (probs.argmax(-1) == config.target_label) & torch.isfinite(
                theta_loss.detach()) & torch.isfinite(probs).all(-1)
            vf = (ratio > 1.0).to(torch.float64).mean(dim=(-2, -1))
            key = torch.stack([vf, theta_loss.detach()], -1)
            better = on_target & (
                (key[:, 0] < best_key[:, 0])
                | ((key[:, 0] == best_key[:, 0]) & (key[:, 1] < best_key[:, 1]))
            )
            best_key[better] = key[better]
            best_delta[better] = delta[better]
            best_probs[better] = probs[better]
            best_index[better] = it
            if config.alpha_adapt == "increase_on_success":
                streak = torch.where(on_target, streak + 1, torch.zeros_like(streak))
                grow = streak >= config.alpha_patience
                alpha = torch.where(grow, alpha * config.alpha_growth, alpha)
                streak = torch.where(grow, torch.zeros_like(streak), streak)
        if it == config.stage2_iters:
            break
        objective = net.to(torch.float64) + alpha * theta_loss
        (grad,) = torch.autograd.grad(objective.sum(), d)
        step = config.lr_stage2 * grad
        if config.stage2_step_cap is not None:
            # the masking hinge is steep far above threshold; bound each row's step
            peak = step.abs().amax(-1, keepdim=True)
            step = step * torch.clamp(config.stage2_step_cap / (peak + 1e-30), max=1.0)
        # keep x + delta a valid waveform; the eps clip is not applied here
        delta = torch.clamp(X + delta - step, -1.0, 1.0) - X
    if torch.isinf(best_key[:, 0]).any():
        raise AttackError("stage 2 seed does not carry the target label")
    return (best_delta.numpy(), best_probs.numpy(), best_key[:, 0].numpy(),
            best_index.numpy(), trace)


def attack_batch(surrogate, X, config: AttackConfig, thresholds=None) -> AttackBatch:
    """Stage 1 for every row, then Stage 2 for the rows Stage 1 fooled.

    ``thresholds`` (one MaskingThreshold per row) enables Stage 2 and the
    violation statistics; without it only Stage 1 runs.
    """
    X = np.asarray(X, dtype=np.float64)
    delta, probs = stage1_batch(surrogate, X, config)
    success = probs.argmax(-1) == config.target_label
    vf = np.full(len(X), np.nan)
    applied = np.zeros(len(X), dtype=bool)
    best_index = np.zeros(len(X), dtype=int)
    trace = None
    if thresholds is not None:
        vf = np.array([perceptual_margin(AudioBuffer(d), t).violation_fraction
                       for d, t in zip(delta, thresholds)])
        idx = np.flatnonzero(success)
        if len(idx) and config.stage2_iters >= 0:
            d2, p2, v2, bi, trace_s = stage2_batch(
                surrogate, X[idx], delta[idx], [thresholds[i] for i in idx], config
            )
            delta[idx], probs[idx], vf[idx], best_index[idx] = d2, p2, v2, bi
            applied[idx] = True
            trace = np.full((len(X),) + trace_s.shape[1:], np.nan)
            trace[idx] = trace_s
    return AttackBatch(X, delta, success, probs, vf, config.target_label,
                       applied, best_index, trace)


def _result(x: AudioBuffer, delta, probs, success, threshold, trace, best,
            config: AttackConfig) -> AttackResult:
    pert = x.with_samples(delta)
    pred = Prediction.from_probabilities(probs)
    margin = perceptual_margin(pert, threshold) if threshold is not None else None
    return AttackResult(x + pert, pert, bool(success), pred,
                        float(pred.probabilities[config.target_label]),
                        margin, trace, best)


def stage1_evade(surrogate, input: AudioBuffer, config: AttackConfig = AttackConfig(),
                 threshold: MaskingThreshold | None = None) -> AttackResult:
    delta, probs = stage1_batch(surrogate, input.samples[None], config)
    success = probs[0].argmax() == config.target_label
    return _result(input, delta[0], probs[0], success, threshold, [], 0, config)


def stage2_imperceptible(surrogate, input: AudioBuffer, stage1_result: AttackResult,
                         threshold: MaskingThreshold,
                         config: AttackConfig = AttackConfig()) -> AttackResult:
    if not stage1_result.stage1_success:
        raise AttackError("stage 2 requires a successful stage 1 seed")
    if len(stage1_result.perturbation) != len(input):
        raise AttackError("stage 1 result belongs to a different input")
    d, p, _, bi, trace = stage2_batch(
        surrogate, input.samples[None], stage1_result.perturbation.samples[None],
        [threshold], config,
    )
    return _result(input, d[0], p[0], True, threshold,
                   [tuple(map(float, row)) for row in trace[0]], int(bi[0]), config)


def objective_terms(surrogate, input: AudioBuffer, perturbation: AudioBuffer,
                    threshold: MaskingThreshold, config: AttackConfig = AttackConfig()):
    """(L_net, L_theta) recomputed from scratch for one perturbation."""
    X = torch.as_tensor(input.samples[None])
    d = torch.as_tensor(perturbation.samples[None])
    labels = torch.tensor([config.target_label])
    scale = threshold_scale(threshold.threshold, threshold.source_max)
    with torch.no_grad():
        net, _ = _net_loss(surrogate, X, d, labels, config.loss_kind)
        theta = perceptual_loss_tensor(d, scale, threshold.frame_spec)
    return float(net[0]), float(theta[0])


def pgd_batch(model, X, labels, epsilon: float, step: float, iters: int,
              loss_kind: str = "cross_entropy") -> torch.Tensor:
    """Untargeted L-inf PGD from the clean point; stays in the ball and in [-1, 1].

    Iterates are kept in float64 so the projection is exact whatever the
    model's precision. Returns a float64 tensor.
    """
    dtype = _model_dtype(model)
    X0 = torch.as_tensor(np.array(X), dtype=torch.float64)
    labels = torch.as_tensor(labels, dtype=torch.long)
    lo = torch.clamp(X0 - epsilon, min=-1.0)
    hi = torch.clamp(X0 + epsilon, max=1.0)
    x = X0.clone()
    for _ in range(iters):
        xd = x.to(dtype).requires_grad_(True)
        per_example = loss_tensor(model(xd), labels, loss_kind)
        (grad,) = torch.autograd.grad(per_example.sum(), xd)
        x = torch.minimum(torch.maximum(x + step * torch.sign(grad.to(torch.float64)), lo), hi)
    return x


def pgd_attack(model, input: AudioBuffer, label: int, epsilon: float = 0.01,
               step: float = 0.0025, iters: int = 20,
               loss_kind: str = "cross_entropy") -> AudioBuffer:
    x = pgd_batch(model, input.samples[None], [int(label)], epsilon, step, iters, loss_kind)
    return input.with_samples(x[0].numpy())
