"""PGD adversarial training and robustness evaluation.

Each minibatch is attacked with untargeted L-inf PGD against the current
weights, then the weights take one Adam step on the attacked batch. A
``mix_clean`` fraction of rows is left unattacked.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .attack import pgd_batch
from .metrics import score_labels
from .models import Dataset, ModelError, predict_labels, run_training

DEFAULT_EPSILON = 0.01


@dataclass(frozen=True)
class AdvTrainConfig:
    pgd_steps: int = 20
    pgd_step_size: float = DEFAULT_EPSILON / 4
    epsilon: float = DEFAULT_EPSILON
    learning_rate: float = 1e-3
    epochs: int = 5
    batch_size: int = 128
    mix_clean: float = 0.5
    loss_kind: str = "cross_entropy"
    seed: int | None = None
    keep: str = "last"  # or "best" (clean validation score)
    monitor_steps: int = 10  # PGD steps for the per-epoch robust validation score

    def __post_init__(self):
        if self.pgd_steps < 0:
            raise ValueError("pgd_steps must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0.0 <= self.mix_clean <= 1.0:
            raise ValueError("mix_clean must lie in [0, 1]")
        if self.keep not in ("best", "last"):
            raise ValueError("keep must be 'best' or 'last'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdvTrainConfig":
        return cls(**d)


def pgd_batch_maker(config: AdvTrainConfig):
    """``make_batch`` hook: replace the trailing rows of each batch by PGD iterates."""

    def make_batch(model, xb, yb):
        if config.pgd_steps == 0:
            return xb, yb
        n_clean = int(round(config.mix_clean * len(xb)))
        if n_clean == len(xb):
            return xb, yb
        adv = pgd_batch(model, xb[n_clean:], yb[n_clean:], config.epsilon,
                        config.pgd_step_size, config.pgd_steps, config.loss_kind)
        return torch.cat([xb[:n_clean], adv.to(xb.dtype)]), yb

    return make_batch


def adversarial_train(model, data: Dataset, config: AdvTrainConfig = AdvTrainConfig(),
                      val: Dataset | None = None):
    """Returns (hardened model, history).

    The final epoch is kept by default; picking the best clean validation
    epoch tends to pick the least robust one. With ``val`` the history also
    records a per-epoch robust F1 under a short PGD attack. With
    ``pgd_steps = 0`` and ``keep="best"`` this is exactly :func:`models.train`.
    """
    if len(data) == 0:
        raise ModelError("empty dataset")
    seed = model.config.seed if config.seed is None else config.seed

    def monitor(m, hist):
        if val is not None and len(val) and config.monitor_steps > 0:
            hist.robust_f1.append(robust_evaluate(
                m, val, config.epsilon, config.monitor_steps, None, config.loss_kind).robust_f1)

    model, hist = run_training(model, data, config.epochs, config.batch_size,
                               config.learning_rate, config.loss_kind, val, seed,
                               pgd_batch_maker(config), config.keep, monitor)
    model.robust = config.pgd_steps > 0
    model.advtrain_config = config
    return model, hist


@dataclass(frozen=True)
class RobustReport:
    clean_f1: float
    robust_f1: float
    asr: float  # percent of originally-correct examples flipped
    attacked: int
    flipped: int


def robust_evaluate(model, data: Dataset, epsilon: float = DEFAULT_EPSILON,
                    steps: int = 20, step_size: float | None = None,
                    loss_kind: str = "cross_entropy", batch_size: int = 64) -> RobustReport:
    step_size = epsilon / 4 if step_size is None else step_size
    clean = predict_labels(model, data.X)
    if steps == 0:
        attacked = clean
    else:
        rows = []
        for i in range(0, len(data), batch_size):
            x = pgd_batch(model, data.X[i:i + batch_size], data.y[i:i + batch_size],
                          epsilon, step_size, steps, loss_kind)
            rows.append(x.numpy())
        attacked = predict_labels(model, np.concatenate(rows))
    correct = clean == data.y
    flipped = correct & (attacked != data.y)
    n = int(correct.sum())
    k = model.config.class_count
    return RobustReport(
        score_labels(data.y, clean, k),
        score_labels(data.y, attacked, k),
        100.0 * int(flipped.sum()) / n if n else 0.0,
        n, int(flipped.sum()),
    )
