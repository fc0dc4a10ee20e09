import numpy as np
import pytest

from dcaptcha.attack import (
    AttackConfig,
    AttackError,
    attack_batch,
    objective_terms,
    pgd_attack,
    pgd_batch,
    stage1_batch,
    stage1_evade,
    stage2_imperceptible,
)
from dcaptcha.audio import AudioBuffer, FrameSpec
from dcaptcha.features import FeatureSpec
from dcaptcha.models import REAL, Dataset, ModelConfig, build_model, predict_labels, train
from dcaptcha.psychoacoustics import global_masking_threshold, perceptual_margin


def _clips(n, seed):
    """Two classes: clean harmonic tones (real) and the same tones with a dull
    high band plus hiss (fake)."""
    rng = np.random.default_rng(seed)
    t = np.arange(8192) / 16000
    X, y = [], []
    for i in range(n):
        f0 = rng.uniform(150, 300)
        x = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 6)) / h for h in range(1, 20))
        x = 0.3 * x / np.abs(x).max()
        if i % 2:
            x = np.convolve(x, np.ones(4) / 4, "same") + 0.01 * rng.standard_normal(len(t))
        X.append(x)
        y.append(i % 2)
    return Dataset(np.array(X), np.array(y))


@pytest.fixture(scope="module")
def surrogate():
    model, _ = train(build_model(ModelConfig("compact_conv", FeatureSpec("lfcc"), (6, 8), seed=1)),
                     _clips(60, 0), epochs=8, batch_size=16, learning_rate=1e-2)
    return model


@pytest.fixture(scope="module")
def fakes(surrogate):
    d = _clips(40, 1)
    X = d.X[d.y == 1]
    return X[predict_labels(surrogate, X) == 1][:6]


def test_zero_iterations_is_identity(surrogate, fakes):
    r = stage1_evade(surrogate, AudioBuffer(fakes[0]), AttackConfig(stage1_iters=0))
    assert not r.perturbation.samples.any()
    assert np.array_equal(r.adversarial.samples, fakes[0])


def test_stage1_norm_and_success(surrogate, fakes):
    cfg = AttackConfig(stage1_iters=200)
    delta, probs = stage1_batch(surrogate, fakes, cfg)
    assert np.abs(delta).max() <= cfg.epsilon
    assert np.mean(probs.argmax(1) == REAL) >= 0.9


def test_stage2_requires_successful_seed(surrogate, fakes):
    th = global_masking_threshold(AudioBuffer(fakes[0]))
    r0 = stage1_evade(surrogate, AudioBuffer(fakes[0]), AttackConfig(stage1_iters=0))
    with pytest.raises(AttackError):
        stage2_imperceptible(surrogate, AudioBuffer(fakes[0]), r0, th)


@pytest.mark.parametrize("alpha", [0.0, 0.05])
def test_stage2_best_iterate_and_trace(surrogate, fakes, alpha):
    x = AudioBuffer(fakes[0])
    th = global_masking_threshold(x, FrameSpec())
    cfg = AttackConfig(stage2_iters=30, alpha=alpha)
    r1 = stage1_evade(surrogate, x, cfg, th)
    assert r1.stage1_success
    r2 = stage2_imperceptible(surrogate, x, r1, th, cfg)
    assert len(r2.loss_trace) == cfg.stage2_iters + 1
    assert r2.final_prediction.label == REAL
    assert r2.perceptual.violation_fraction <= r1.perceptual.violation_fraction
    assert np.allclose(r2.adversarial.samples, x.samples + r2.perturbation.samples)
    # objective consistency at the returned iterate
    net, theta = objective_terms(surrogate, x, r2.perturbation, th, cfg)
    rec_net, rec_theta = r2.loss_trace[r2.best_index]
    assert net == pytest.approx(rec_net, rel=1e-6, abs=1e-9)
    assert theta == pytest.approx(rec_theta, rel=1e-6, abs=1e-12)


def test_batch_attack_determinism(surrogate, fakes):
    th = [global_masking_threshold(AudioBuffer(x)) for x in fakes[:3]]
    cfg = AttackConfig(stage2_iters=10)
    a = attack_batch(surrogate, fakes[:3], cfg, th)
    b = attack_batch(surrogate, fakes[:3], cfg, th)
    assert np.array_equal(a.perturbation, b.perturbation)
    assert np.array_equal(a.adversarial, fakes[:3] + a.perturbation)
    for i in np.flatnonzero(a.stage2_applied):
        seed = perceptual_margin(AudioBuffer(stage1_batch(surrogate, fakes[i:i + 1], cfg)[0][0]),
                                 th[i]).violation_fraction
        assert a.violation_fraction[i] <= seed


def test_pgd_projection_and_zero_iters(surrogate, fakes):
    x = fakes[:4].copy()
    x[0, :10] = 0.999  # near the rail
    out = pgd_batch(surrogate, x, [1] * 4, 0.01, 0.0025, 20).numpy()
    assert np.abs(out - x).max() <= 0.01 + 1e-12
    assert out.max() <= 1.0 and out.min() >= -1.0
    same = pgd_attack(surrogate, AudioBuffer(x[1]), 1, iters=0)
    assert np.array_equal(same.samples, x[1])


def test_pgd_flips_undefended_model(surrogate):
    d = _clips(30, 2)
    ok = predict_labels(surrogate, d.X) == d.y
    adv = pgd_batch(surrogate, d.X[ok], d.y[ok], 0.01, 0.0025, 20).numpy()
    assert np.mean(predict_labels(surrogate, adv) != d.y[ok]) >= 0.5


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0)
    with pytest.raises(ValueError):
        AttackConfig(stage1_iters=-1)
    with pytest.raises(ValueError):
        AttackConfig(alpha_adapt="sometimes")
