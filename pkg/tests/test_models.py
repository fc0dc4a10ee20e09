import numpy as np
import pytest
import torch

from dcaptcha.audio import AudioBuffer
from dcaptcha.features import FeatureSpec
from dcaptcha.models import (
    Dataset,
    GMMClassifier,
    ModelConfig,
    ModelError,
    build_model,
    fit_diag_gmm,
    forward,
    gmm_fit,
    gmm_predict,
    input_gradient,
    load_checkpoint,
    loss,
    parameter_count,
    predict_labels,
    save_checkpoint,
    state_bytes,
    train,
    undersample,
    zero_head,
)

from helpers import CEPSTRAL, COMBOS, gradcheck_model, relative_error


def _cfg(arch="compact_conv", kind="lfcc", **kw):
    return ModelConfig(arch, FeatureSpec(kind), **kw)


def test_config_compatibility():
    with pytest.raises(ModelError):
        _cfg("raw_conv", "lfcc")
    with pytest.raises(ModelError):
        _cfg("compact_conv", "raw")
    with pytest.raises(ModelError):
        _cfg("gmm", "lfcc")
    with pytest.raises(ModelError):
        _cfg(class_count=1)
    c = _cfg(widths=(4, 8), seed=3)
    assert ModelConfig.from_dict(c.to_dict()) == c


@pytest.mark.parametrize("arch,kind", COMBOS)
def test_input_gradient_matches_finite_differences(arch, kind):
    tol = 1e-3 if kind in CEPSTRAL else 1e-4
    assert gradcheck_model(arch, kind, n_coords=20) < tol


def test_parameter_gradients_match_finite_differences(rng):
    model = build_model(_cfg("mlp", "lfcc", dtype="float64"))
    x = torch.as_tensor(rng.standard_normal((3, 4000)) * 0.1)
    y = torch.tensor([0, 1, 1])

    def total():
        return torch.nn.functional.cross_entropy(model(x), y, reduction="sum")

    model.zero_grad()
    total().backward()
    for p in (model.hidden.weight, model.head.bias):
        for idx in rng.choice(p.numel(), min(10, p.numel()), replace=False):
            flat = p.data.view(-1)
            old = flat[idx].item()
            with torch.no_grad():
                flat[idx] = old + 1e-6
                up = total().item()
                flat[idx] = old - 1e-6
                down = total().item()
                flat[idx] = old
            fd = (up - down) / 2e-6
            assert relative_error(p.grad.view(-1)[idx].item(), fd, 1e-6) < 1e-4


def test_zero_head_gives_half_and_zero_gradient(rng):
    model = zero_head(build_model(_cfg(dtype="float64")))
    b = AudioBuffer(rng.standard_normal(8000) * 0.1)
    pred = forward(model, b)
    assert np.allclose(pred.probabilities, [0.5, 0.5])
    g = input_gradient(model, b, 1)
    assert g.shape == (8000,) and not g.any()


def test_probabilities_and_determinism(rng):
    model = build_model(_cfg())
    b = AudioBuffer(rng.standard_normal(8000) * 0.1)
    p1, p2 = forward(model, b), forward(model, AudioBuffer(b.samples.copy()))
    assert abs(p1.probabilities.sum() - 1) < 1e-6
    assert np.array_equal(p1.probabilities, p2.probabilities)


def test_loss_closed_forms():
    model = zero_head(build_model(_cfg(dtype="float64")))
    b = AudioBuffer(np.random.default_rng(0).standard_normal(4000) * 0.1)
    assert loss(model, b, 0, "cross_entropy") == pytest.approx(np.log(2))
    assert loss(model, b, 0, "binary_focal") == pytest.approx(0.25 * np.log(2))
    with pytest.raises(ModelError):
        loss(model, b, 2)
    for p in np.linspace(0.01, 1.0, 50):
        assert (1 - p) ** 2 * -np.log(p) <= -np.log(p) + 1e-15


def _separable(n=80, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(4000) / 16000
    X, y = [], []
    for i in range(n):
        f = 300.0 if i % 2 == 0 else 3000.0
        X.append(0.3 * np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) + 0.01 * rng.standard_normal(4000))
        y.append(i % 2)
    return Dataset(np.array(X), np.array(y))


def test_separable_training_and_determinism():
    data = _separable()
    # oracle: band energy alone separates the classes (closed-form linear rule)
    spec = np.abs(np.fft.rfft(data.X, axis=1))
    hi = spec[:, 500:].sum(1) > spec[:, :500].sum(1)
    assert np.array_equal(hi.astype(int), data.y)
    m1, h1 = train(build_model(_cfg("mlp", "lfcc", seed=1)), data, epochs=5, batch_size=16,
                   learning_rate=1e-2)
    assert h1.train_f1[-1] >= 0.99
    m2, _ = train(build_model(_cfg("mlp", "lfcc", seed=1)), data, epochs=5, batch_size=16,
                  learning_rate=1e-2)
    assert state_bytes(m1) == state_bytes(m2)


def test_zero_learning_rate_keeps_parameters():
    data = _separable(20)
    m = build_model(_cfg("mlp", "lfcc", seed=2))
    m.fit_normalizer(data.X)
    before = [p.detach().clone() for p in m.parameters()]
    train(m, data, epochs=2, batch_size=8, learning_rate=0.0)
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_training_errors():
    with pytest.raises(ModelError):
        train(build_model(_cfg("mlp")), Dataset(np.zeros((0, 4000)), np.zeros(0)))
    with pytest.raises(ModelError):
        train(build_model(_cfg("mlp")), Dataset(np.zeros((4, 4000)), np.zeros(4)))


def test_undersample_balances():
    d = Dataset(np.zeros((10, 3)), [0] * 7 + [1] * 3)
    u = undersample(d, 0)
    assert np.bincount(u.y).tolist() == [3, 3]
    assert np.array_equal(undersample(d, 0).X, u.X)


def test_gmm_separated_clusters():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 1, (500, 4))
    b = rng.normal(10, 1, (500, 4))
    fa, fb = fit_diag_gmm(a, 2, seed=0), fit_diag_gmm(b, 2, seed=1)
    from dcaptcha.models import _diag_log_prob, _logsumexp

    def score(f, Z):
        return _logsumexp(_diag_log_prob(Z, f.weights, f.means, f.variances), 1)

    Z = np.vstack([a, b])
    pred = (score(fb, Z) > score(fa, Z)).astype(int)
    assert np.array_equal(pred, np.repeat([0, 1], 500))


def test_gmm_em_monotone_and_floor():
    rng = np.random.default_rng(1)
    Z = np.vstack([rng.normal(0, 1, (300, 3)), rng.normal(4, 0.5, (300, 3)),
                   np.zeros((40, 3))])  # a collapsing point mass
    fit = fit_diag_gmm(Z, 4, iters=30, seed=0, var_floor=1e-6)
    ll = np.array(fit.log_likelihood)
    assert np.all(np.diff(ll) >= -1e-8)
    assert fit.variances.min() >= 1e-6


def test_gmm_classifier_on_audio():
    data = _separable(40)
    m = gmm_fit(build_model(_cfg("gmm", "mfcc", widths=(2,))), data, iters=10)
    assert isinstance(m, GMMClassifier)
    assert np.mean(predict_labels(m, data.X) == data.y) == 1.0
    p = gmm_predict(m, AudioBuffer(data.X[0]))
    assert abs(p.probabilities.sum() - 1) < 1e-6


def test_checkpoint_round_trip(tmp_path, rng):
    m = build_model(_cfg(seed=5))
    m.fit_normalizer(rng.standard_normal((4, 8000)) * 0.1)
    save_checkpoint(m, tmp_path / "m.ckpt", {"note": 1})
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert state_bytes(back) == state_bytes(m)
    assert back.config == m.config
    import json

    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["note"] == 1 and meta["parameter_count"] == parameter_count(m)
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    with pytest.raises(ModelError):
        load_checkpoint(tmp_path / "bad.ckpt")
