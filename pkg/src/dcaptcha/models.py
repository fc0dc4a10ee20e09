"""Small differentiable classifiers over audio frontends.

``compact_conv`` and ``mlp`` read 2-D spectral features, ``raw_conv`` reads
the waveform directly and ``gmm`` scores MFCC frames with per-class
diagonal Gaussian mixtures. Every model maps a batch of waveforms [B, T] to
class logits, so input gradients flow through the frontend.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .audio import AudioBuffer
from .features import FeatureSpec, extract_tensor

REAL, FAKE = 0, 1
ARCHITECTURES = ("compact_conv", "raw_conv", "mlp", "gmm")
FOCAL_GAMMA = 2.0

_DEFAULT_WIDTHS = {"compact_conv": (8, 16), "raw_conv": (8, 16), "mlp": (32,), "gmm": (8,)}
_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    frontend: FeatureSpec
    widths: tuple = ()
    class_count: int = 2
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.class_count < 2:
            raise ModelError("class_count must be >= 2")
        raw = self.frontend.kind == "raw"
        if self.architecture == "raw_conv" and not raw:
            raise ModelError("raw_conv requires the raw frontend")
        if self.architecture in ("compact_conv", "mlp") and raw:
            raise ModelError(f"{self.architecture} requires a 2-D feature frontend")
        if self.architecture == "gmm" and self.frontend.kind != "mfcc":
            raise ModelError("gmm requires the mfcc frontend")
        if not self.widths:
            object.__setattr__(self, "widths", _DEFAULT_WIDTHS[self.architecture])
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    def to_dict(self) -> dict:
        return {
            "architecture": self.architecture,
            "frontend": self.frontend.to_dict(),
            "widths": list(self.widths),
            "class_count": self.class_count,
            "seed": self.seed,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            d["architecture"], FeatureSpec.from_dict(d["frontend"]), tuple(d["widths"]),
            d.get("class_count", 2), d.get("seed", 0), d.get("dtype", "float32"),
        )


@dataclass(frozen=True)
class Prediction:
    probabilities: np.ndarray
    label: int
    confidence: float

    @classmethod
    def from_probabilities(cls, p) -> "Prediction":
        p = np.asarray(p, dtype=np.float64)
        return cls(p, int(np.argmax(p)), float(np.max(p)))


def sinc_bank(n_filters: int, length: int) -> np.ndarray:
    """Hamming-windowed band-pass filters tiling [0, Nyquist] linearly.

    Used to initialise the first layer of ``raw_conv`` (still trainable).
    """
    edges = np.linspace(0.0, 0.5, n_filters + 1)
    t = np.arange(length) - (length - 1) / 2
    win = np.hamming(length)
    bank = [
        (2 * hi * np.sinc(2 * hi * t) - 2 * lo * np.sinc(2 * lo * t)) * win
        for lo, hi in zip(edges[:-1], edges[1:])
    ]
    bank = np.array(bank)
    return bank / np.linalg.norm(bank, axis=1, keepdims=True)


class DifferentiableModel(nn.Module):
    """Frontend + standardization + body; ``forward`` returns logits."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.frontend = config.frontend
        n_coef = 1 if config.frontend.kind == "raw" else config.frontend.n_coefficients()
        self.register_buffer("feat_mean", torch.zeros(n_coef))
        self.register_buffer("feat_std", torch.ones(n_coef))
        self.register_buffer("normalizer_fitted", torch.zeros(()))
        w = config.widths
        k = config.class_count
        arch = config.architecture
        if arch == "compact_conv":
            self.freq_pool = max(1, n_coef // 48)
            self.conv1 = nn.Conv2d(1, w[0], 3, padding=1)
            self.conv2 = nn.Conv2d(w[0], w[1], 3, padding=1)
            self.head = nn.Linear(2 * w[1], k)
        elif arch == "raw_conv":
            self.conv1 = nn.Conv1d(1, w[0], 65, stride=4)
            with torch.no_grad():
                self.conv1.weight.copy_(torch.from_numpy(sinc_bank(w[0], 65))[:, None])
                self.conv1.bias.zero_()
            self.conv2 = nn.Conv1d(w[0], w[1], 3, padding=1)
            self.head = nn.Linear(2 * w[1], k)
        elif arch == "mlp":
            self.hidden = nn.Linear(2 * n_coef, w[0])
            self.head = nn.Linear(w[0], k)
        else:
            raise ModelError("use GMMClassifier for the gmm architecture")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        z = extract_tensor(x, self.frontend)
        if self.frontend.kind == "spectrogram":
            z = torch.log(z + 1e-6)
        return (z - self.feat_mean) / self.feat_std

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.features(x)
        arch = self.config.architecture
        if arch == "compact_conv":
            h = z.unsqueeze(1)
            if self.freq_pool > 1:
                h = F.avg_pool2d(h, (1, self.freq_pool))
            h = F.silu(self.conv1(h))
            h = F.avg_pool2d(h, 2, ceil_mode=True)
            h = F.silu(self.conv2(h)).flatten(2)
        elif arch == "raw_conv":
            # learned filterbank -> log band energies over ~16 ms blocks
            h = F.avg_pool1d(self.conv1(z) ** 2, 64, 32)
            h = F.silu(self.conv2(torch.log(h + 1e-6)))
        else:
            pooled = torch.cat([z.mean(-2), z.std(-2)], dim=-1)
            return self.head(F.silu(self.hidden(pooled)))
        pooled = torch.cat([h.mean(-1), h.std(-1)], dim=-1)
        return self.head(pooled)

    @torch.no_grad()
    def fit_normalizer(self, X: np.ndarray, batch_size: int = 256):
        """Per-coefficient mean/std of the frontend over a training set."""
        dtype = self.feat_mean.dtype
        self.feat_mean.zero_()
        self.feat_std.fill_(1.0)
        s1 = s2 = 0.0
        n = 0
        for i in range(0, len(X), batch_size):
            z = self.features(torch.as_tensor(X[i : i + batch_size], dtype=dtype))
            z = z.reshape(-1, z.shape[-1]).to(torch.float64)
            if self.frontend.kind == "raw":
                z = z.reshape(-1, 1)
            s1 = s1 + z.sum(0)
            s2 = s2 + (z**2).sum(0)
            n += z.shape[0]
        mean = s1 / n
        std = torch.sqrt(torch.clamp(s2 / n - mean**2, min=1e-12))
        self.feat_mean.copy_(mean.to(dtype))
        self.feat_std.copy_(std.to(dtype))
        self.normalizer_fitted.fill_(1.0)


class GMMClassifier(nn.Module):
    """Per-class diagonal GMMs over MFCC frames; logits = mean frame log-likelihood."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.frontend = config.frontend
        k = config.widths[0]
        d = config.frontend.n_coefficients()
        c = config.class_count
        self.register_buffer("log_weights", torch.full((c, k), -np.log(k)))
        self.register_buffer("means", torch.zeros(c, k, d))
        self.register_buffer("variances", torch.ones(c, k, d))

    def frame_log_likelihood(self, z: torch.Tensor) -> torch.Tensor:
        """[..., frames, d] -> [..., frames, class]."""
        diff = z[..., None, None, :] - self.means
        comp = -0.5 * (
            (diff**2 / self.variances).sum(-1)
            + torch.log(2 * np.pi * self.variances).sum(-1)
        )
        return torch.logsumexp(comp + self.log_weights, dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = extract_tensor(x, self.frontend)
        return self.frame_log_likelihood(z).mean(-2)


def build_model(config: ModelConfig):
    """Deterministically initialized model for ``config``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        if config.architecture == "gmm":
            model = GMMClassifier(config)
        else:
            model = DifferentiableModel(config)
    return model.to(_DTYPES[config.dtype]).eval()


def zero_head(model: DifferentiableModel):
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.zero_()
    return model


def parameter_count(model) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# inference and losses


def _as_batch(model, X) -> torch.Tensor:
    dtype = next(iter(model.state_dict().values())).dtype
    if isinstance(X, AudioBuffer):
        X = X.samples[None]
    return torch.as_tensor(np.array(X), dtype=dtype)


@torch.no_grad()
def predict_proba(model, X, batch_size: int = 256) -> np.ndarray:
    """Class probabilities for a batch of waveforms [N, T] (or one buffer)."""
    xb = _as_batch(model, X)
    out = [
        torch.softmax(model(xb[i : i + batch_size]).to(torch.float64), dim=-1)
        for i in range(0, len(xb), batch_size)
    ]
    return torch.cat(out).numpy() if out else np.zeros((0, model.config.class_count))


def predict_labels(model, X, batch_size: int = 256) -> np.ndarray:
    return predict_proba(model, X, batch_size).argmax(-1)


def forward(model, buffer: AudioBuffer) -> Prediction:
    return Prediction.from_probabilities(predict_proba(model, buffer)[0])


def loss_tensor(logits: torch.Tensor, labels: torch.Tensor, loss_kind: str) -> torch.Tensor:
    """Per-example loss, [B]."""
    logp = torch.log_softmax(logits, dim=-1).gather(-1, labels[:, None])[:, 0]
    if loss_kind == "cross_entropy":
        return -logp
    if loss_kind == "binary_focal":
        return -((1.0 - torch.exp(logp)) ** FOCAL_GAMMA) * logp
    raise ModelError(f"unknown loss kind {loss_kind!r}")


def _check_label(model, label):
    if not 0 <= int(label) < model.config.class_count:
        raise ModelError(f"label {label} outside [0, {model.config.class_count})")


def loss(model, buffer: AudioBuffer, label: int, loss_kind: str = "cross_entropy") -> float:
    _check_label(model, label)
    with torch.no_grad():
        logits = model(_as_batch(model, buffer))
        return float(loss_tensor(logits, torch.tensor([int(label)]), loss_kind)[0])


def batch_input_gradient(model, X: torch.Tensor, labels: torch.Tensor,
                         loss_kind: str = "cross_entropy"):
    """(per-example loss, d loss / d X) for a batch; examples are independent."""
    X = X.detach().requires_grad_(True)
    per_example = loss_tensor(model(X), labels, loss_kind)
    (grad,) = torch.autograd.grad(per_example.sum(), X)
    return per_example.detach(), grad


def input_gradient(model, buffer: AudioBuffer, label: int,
                   loss_kind: str = "cross_entropy") -> np.ndarray:
    _check_label(model, label)
    X = _as_batch(model, buffer)
    _, grad = batch_input_gradient(model, X, torch.tensor([int(label)]), loss_kind)
    return grad[0].to(torch.float64).numpy()


# ---------------------------------------------------------------------------
# datasets and training


@dataclass
class Dataset:
    X: np.ndarray  # [N, T]
    y: np.ndarray  # [N]

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ModelError("dataset needs X [N, T] and y [N]")

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_buffers(cls, buffers, labels) -> "Dataset":
        return cls(np.stack([b.samples for b in buffers]), np.asarray(labels))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx])


def undersample(data: Dataset, seed: int) -> Dataset:
    """Drop majority-class examples at random until classes are balanced."""
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(data.y, return_counts=True)
    n = counts.min()
    keep = np.concatenate(
        [rng.choice(np.flatnonzero(data.y == c), n, replace=False) for c in classes]
    )
    return data.subset(np.sort(keep))


def _require_trainable(data: Dataset):
    if len(data) == 0:
        raise ModelError("empty dataset")
    if len(np.unique(data.y)) < 2:
        raise ModelError("dataset contains a single class")


def f1_score(y_true, y_pred, positive: int = 1) -> float:
    from .metrics import ConfusionCounts, f1

    return f1(ConfusionCounts.from_labels(y_true, y_pred, positive)).f1


@dataclass
class TrainHistory:
    train_f1: list = field(default_factory=list)
    val_f1: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    robust_f1: list = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def make_optimizer(model, learning_rate: float):
    return torch.optim.Adam(model.parameters(), lr=learning_rate,
                            betas=(0.9, 0.999), eps=1e-8)


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def run_training(model, data: Dataset, epochs: int, batch_size: int,
                 learning_rate: float, loss_kind: str, val: Dataset | None,
                 seed: int, make_batch, keep: str = "best", epoch_hook=None):
    """Shared Adam loop. ``make_batch(model, xb, yb)`` returns the tensors to fit.

    ``keep="best"`` reloads the epoch with the best validation score (train
    score without ``val``); ``keep="last"`` keeps the final weights.
    ``epoch_hook(model, hist)`` runs after each epoch's bookkeeping.
    Returns (model, history).
    """
    from .metrics import score_labels

    if keep not in ("best", "last"):
        raise ModelError(f"keep must be 'best' or 'last', got {keep!r}")
    k = model.config.class_count
    _require_trainable(data)
    if model.normalizer_fitted.item() == 0:
        model.fit_normalizer(data.X)
    dtype = model.feat_mean.dtype
    opt = make_optimizer(model, learning_rate)
    rng = np.random.default_rng(seed)
    hist = TrainHistory()
    best_state, best_score = copy.deepcopy(model.state_dict()), -np.inf
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for epoch in range(epochs):
            losses = []
            for idx in epoch_batches(len(data), batch_size, rng):
                xb = torch.as_tensor(data.X[idx], dtype=dtype)
                yb = torch.as_tensor(data.y[idx])
                xb, yb = make_batch(model, xb, yb)
                model.train()
                batch_loss = loss_tensor(model(xb), yb, loss_kind).mean()
                opt.zero_grad()
                batch_loss.backward()
                opt.step()
                model.eval()
                losses.append(batch_loss.item())
            hist.train_loss.append(float(np.mean(losses)))
            hist.train_f1.append(score_labels(data.y, predict_labels(model, data.X), k))
            score = hist.train_f1[-1]
            if val is not None and len(val):
                hist.val_f1.append(score_labels(val.y, predict_labels(model, val.X), k))
                score = hist.val_f1[-1]
            if epoch_hook is not None:
                epoch_hook(model, hist)
            if keep == "last" or score > best_score:
                best_score, hist.best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return model, hist


def train(model, data: Dataset, epochs: int = 5, batch_size: int = 128,
          learning_rate: float = 1e-3, loss_kind: str = "cross_entropy",
          val: Dataset | None = None, seed: int | None = None):
    """Standard training with Adam; keeps the best-validation epoch."""
    if isinstance(model, GMMClassifier):
        _require_trainable(data)
        return gmm_fit(model, data), TrainHistory()
    seed = model.config.seed if seed is None else seed
    return run_training(model, data, epochs, batch_size, learning_rate, loss_kind,
                        val, seed, lambda m, xb, yb: (xb, yb))


# ---------------------------------------------------------------------------
# Gaussian mixtures


@dataclass
class GMMFit:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood: list  # mean per-frame log-likelihood after init and each EM step


def _diag_log_prob(Z, weights, means, variances):
    diff = Z[:, None, :] - means[None]
    comp = -0.5 * ((diff**2 / variances[None]).sum(-1)
                   + np.log(2 * np.pi * variances).sum(-1)[None])
    return comp + np.log(weights)[None]


def _logsumexp(a, axis):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def kmeans(Z, k, seed, iters=10):
    rng = np.random.default_rng(seed)
    centres = Z[rng.choice(len(Z), k, replace=False)].copy()
    for _ in range(iters):
        assign = ((Z[:, None] - centres[None]) ** 2).sum(-1).argmin(1)
        for j in range(k):
            if np.any(assign == j):
                centres[j] = Z[assign == j].mean(0)
    return centres, assign


def fit_diag_gmm(Z, k: int, iters: int = 30, seed: int = 0,
                 var_floor: float = 1e-6, tol: float = 1e-6) -> GMMFit:
    """EM for a diagonal-covariance mixture, initialised from k-means."""
    Z = np.asarray(Z, dtype=np.float64)
    if len(Z) < 10 * k:
        raise ModelError(f"need at least {10 * k} frames for {k} components, got {len(Z)}")
    means, assign = kmeans(Z, k, seed)
    global_var = Z.var(0)
    variances = np.empty_like(means)
    weights = np.empty(k)
    for j in range(k):
        members = Z[assign == j]
        weights[j] = max(len(members), 1) / len(Z)
        variances[j] = members.var(0) if len(members) > 1 else global_var
    weights /= weights.sum()
    variances = np.maximum(variances, var_floor)
    ll = [float(_logsumexp(_diag_log_prob(Z, weights, means, variances), 1).mean())]
    for _ in range(iters):
        lp = _diag_log_prob(Z, weights, means, variances)
        resp = np.exp(lp - _logsumexp(lp, 1)[:, None])
        nk = resp.sum(0) + 1e-300
        weights = nk / nk.sum()
        means = (resp.T @ Z) / nk[:, None]
        variances = (resp.T @ Z**2) / nk[:, None] - means**2
        variances = np.maximum(variances, var_floor)
        ll.append(float(_logsumexp(_diag_log_prob(Z, weights, means, variances), 1).mean()))
        if abs(ll[-1] - ll[-2]) < tol:
            break
    return GMMFit(weights, means, variances, ll)


def _frames(model: GMMClassifier, X) -> np.ndarray:
    with torch.no_grad():
        z = extract_tensor(torch.as_tensor(X, dtype=torch.float64), model.frontend)
    return z.reshape(-1, z.shape[-1]).numpy()


def gmm_fit(model: GMMClassifier, data: Dataset, iters: int = 30,
            var_floor: float = 1e-6) -> GMMClassifier:
    """Fit one mixture per class on that class's MFCC frames."""
    k = model.config.widths[0]
    fits = []
    for c in range(model.config.class_count):
        Xc = data.X[data.y == c]
        if len(Xc) == 0:
            raise ModelError(f"class {c} has no examples")
        fits.append(fit_diag_gmm(_frames(model, Xc), k, iters,
                                 model.config.seed + c, var_floor))
    dtype = model.means.dtype
    with torch.no_grad():
        model.log_weights.copy_(torch.tensor(np.log([f.weights for f in fits]), dtype=dtype))
        model.means.copy_(torch.tensor(np.stack([f.means for f in fits]), dtype=dtype))
        model.variances.copy_(torch.tensor(np.stack([f.variances for f in fits]), dtype=dtype))
    model.fits = fits
    return model


def gmm_predict(model: GMMClassifier, buffer: AudioBuffer) -> Prediction:
    return forward(model, buffer)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"DCAPCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(model, path, manifest: dict | None = None):
    """Binary checkpoint (header + flat float64 payload) plus a JSON manifest."""
    path = Path(path)
    state = model.state_dict()
    names = list(state)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "tensors": [[n, list(state[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = np.concatenate(
        [state[n].detach().to(torch.float64).reshape(-1).numpy() for n in names]
        or [np.zeros(0)]
    ).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload.tobytes())
    meta = {"config": model.config.to_dict(), "parameter_count": parameter_count(model)}
    meta.update(manifest or {})
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ModelError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<HI", raw, len(_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    start = len(_MAGIC) + 6
    header = json.loads(raw[start : start + hlen])
    payload = np.frombuffer(raw[start + hlen :], dtype="<f8")
    model = build_model(ModelConfig.from_dict(header["config"]))
    dtype = _DTYPES[model.config.dtype]
    state, offset = {}, 0
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        state[name] = torch.from_numpy(payload[offset : offset + n].copy()).reshape(shape).to(dtype)
        offset += n
    model.load_state_dict(state)
    return model.eval()


def state_bytes(model) -> bytes:
    buf = io.BytesIO()
    for v in model.state_dict().values():
        buf.write(v.detach().to(torch.float64).numpy().tobytes())
    return buf.getvalue()
