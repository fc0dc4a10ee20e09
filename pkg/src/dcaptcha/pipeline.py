"""Challenge-response screening: Time, Realism, Task and Identity checks.

A call is accepted only when every check passes. All four verdicts are
always computed so a session record shows each module's view; failure
attribution follows the fixed order time -> realism -> task -> identity.
The human-suspicion module is a pass-through hook.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, AudioBuffer, TooShortError
from .corpus import TASKS
from .metrics import emit_report
from .models import REAL, predict_labels

MODULES = ("time", "realism", "task", "identity")
DEFAULT_DEADLINE_S = 1.0
DEFAULT_IDENTITY_THRESHOLD = 0.7


@dataclass(frozen=True)
class Challenge:
    id: int
    task_kind: str
    issued_at: float
    response_deadline_s: float = DEFAULT_DEADLINE_S

    def __post_init__(self):
        if self.task_kind not in TASKS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")


class ChallengeIssuer:
    """Seeded stream of challenges with non-decreasing issue times."""

    def __init__(self, seed: int, deadline_s: float = DEFAULT_DEADLINE_S,
                 interval_s: float = 5.0):
        self._rng = np.random.default_rng(seed)
        self._next_id = 0
        self._clock = 0.0
        self.deadline_s = deadline_s
        self.interval_s = interval_s

    def issue(self) -> Challenge:
        task = TASKS[int(self._rng.integers(len(TASKS)))]
        c = Challenge(self._next_id, task, self._clock, self.deadline_s)
        self._next_id += 1
        self._clock += self.interval_s
        return c


def issue_challenge(seed: int, deadline_s: float = DEFAULT_DEADLINE_S) -> Challenge:
    return ChallengeIssuer(seed, deadline_s).issue()


@dataclass(frozen=True)
class TaskModel:
    """"Contains task" decision from a multi-class task classifier."""

    model: object
    task: str

    def contains(self, buffer: AudioBuffer) -> tuple[bool, float]:
        from .models import predict_proba

        p = predict_proba(self.model, buffer)[0]
        k = TASKS.index(self.task)
        return bool(np.argmax(p) == k), float(p[k])


@dataclass
class PipelineConfig:
    realism_model: object
    task_models: dict  # task kind -> TaskModel
    identity_threshold: float = DEFAULT_IDENTITY_THRESHOLD
    hardened: bool = False

    def __post_init__(self):
        missing = set(TASKS) - set(self.task_models)
        if missing:
            raise ValueError(f"no task model for {sorted(missing)}")

    @classmethod
    def from_classifier(cls, realism_model, task_classifier, **kw) -> "PipelineConfig":
        return cls(realism_model, {t: TaskModel(task_classifier, t) for t in TASKS}, **kw)


@dataclass(frozen=True)
class ModuleVerdict:
    passed: bool
    score: float


@dataclass
class ChallengeSession:
    a0: AudioBuffer
    challenge: Challenge
    response: AudioBuffer | None
    elapsed_s: float | None
    verdicts: dict = field(default_factory=dict)

    @property
    def final(self) -> str:
        return "accept" if all(self.verdicts[m].passed for m in MODULES) else "reject"

    @property
    def first_failure(self) -> str | None:
        for m in MODULES:
            if not self.verdicts[m].passed:
                return m
        return None

    def record(self) -> dict:
        return {
            "challenge_id": self.challenge.id,
            "task": self.challenge.task_kind,
            "elapsed_s": self.elapsed_s,
            **{f"{m}_pass": self.verdicts[m].passed for m in MODULES},
            **{f"{m}_score": round(self.verdicts[m].score, 6) for m in MODULES},
            "final": self.final,
            "first_failure": self.first_failure or "",
        }


IDENTITY_BANDS = 24


def identity_embedding(buffer: AudioBuffer) -> np.ndarray:
    """Level-free timbre vector: the long-term log envelope averaged into
    ``IDENTITY_BANDS`` bands, mean removed, unit norm."""
    env = np.log(spectral_envelope(buffer)).mean(1)
    v = np.array([b.mean() for b in np.array_split(env, IDENTITY_BANDS)])
    v = v - v.mean()
    return v / (np.linalg.norm(v) + 1e-12)


def cosine(a, b) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))


def human_hook(session: ChallengeSession) -> bool:
    """Placeholder for the human-suspicion decision; never objects."""
    return True


def verify_response(a0: AudioBuffer, challenge: Challenge, response: AudioBuffer | None,
                    elapsed_s: float | None, config: PipelineConfig) -> ChallengeSession:
    s = ChallengeSession(a0, challenge, response, elapsed_s)
    if response is None or elapsed_s is None:
        s.verdicts = {m: ModuleVerdict(False, float("nan")) for m in MODULES}
        return s
    v = {"time": ModuleVerdict(elapsed_s <= challenge.response_deadline_s, float(elapsed_s))}
    from .models import predict_proba

    p_real = float(predict_proba(config.realism_model, response)[0][REAL])
    v["realism"] = ModuleVerdict(
        bool(predict_labels(config.realism_model, response)[0] == REAL), p_real)
    ok, score = config.task_models[challenge.task_kind].contains(response)
    v["task"] = ModuleVerdict(ok, score)
    sim = cosine(identity_embedding(a0), identity_embedding(response))
    v["identity"] = ModuleVerdict(sim >= config.identity_threshold, sim)
    s.verdicts = v
    return s


# ---------------------------------------------------------------------------
# toy voice conversion: analysis -> envelope swap -> resynthesis

VC_NFFT = 512
VC_HOP = 128
ENVELOPE_SMOOTH_BINS = 15


def _stft(x):
    from scipy.signal import stft

    _, _, Z = stft(x, fs=SAMPLE_RATE, nperseg=VC_NFFT, noverlap=VC_NFFT - VC_HOP,
                   boundary="even")
    return Z


def _istft(Z, n):
    from scipy.signal import istft

    _, y = istft(Z, fs=SAMPLE_RATE, nperseg=VC_NFFT, noverlap=VC_NFFT - VC_HOP,
                 boundary=True)
    y = y[:n]
    return np.pad(y, (0, n - len(y)))


def _smooth(mag):
    k = np.ones(ENVELOPE_SMOOTH_BINS) / ENVELOPE_SMOOTH_BINS
    pad = ENVELOPE_SMOOTH_BINS // 2
    padded = np.pad(mag, ((pad, pad), (0, 0)), mode="edge")
    return np.apply_along_axis(lambda c: np.convolve(c, k, "valid"), 0, padded)


def spectral_envelope(buffer: AudioBuffer) -> np.ndarray:
    """Per-frame smoothed magnitude envelope, [bins, frames]."""
    if len(buffer) < VC_NFFT:
        raise TooShortError(f"{len(buffer)} samples < one {VC_NFFT}-sample frame")
    return _smooth(np.abs(_stft(buffer.samples))) + 1e-9


def average_envelope(buffers) -> np.ndarray:
    """Speaker profile: log-mean of the per-frame envelopes of ``buffers``, [bins]."""
    logs = [np.log(spectral_envelope(b)).mean(1) for b in buffers]
    return np.exp(np.mean(logs, axis=0))


def toy_voice_convert(source: AudioBuffer, target_profile) -> AudioBuffer:
    """Swap the source's smoothed envelope for ``target_profile`` (per bin, or
    per bin and frame), keep source phases and overlap-add back."""
    if len(source) < VC_NFFT:
        raise TooShortError(f"{len(source)} samples < one {VC_NFFT}-sample frame")
    Z = _stft(source.samples)
    env = _smooth(np.abs(Z)) + 1e-9
    target = np.asarray(target_profile, dtype=np.float64)
    if target.ndim == 1:
        target = target[:, None]
    y = _istft(Z / env * target, len(source))
    return source.with_samples(y)


# ---------------------------------------------------------------------------
# attack scenarios


@dataclass(frozen=True)
class AttackerAsset:
    a0: AudioBuffer
    response: AudioBuffer


@dataclass
class ScenarioReport:
    trials: list
    hardened: bool

    @property
    def n(self) -> int:
        return len(self.trials)

    @property
    def success_rate(self) -> float:
        return 100.0 * sum(t["final"] == "accept" for t in self.trials) / max(self.n, 1)

    @property
    def failure_attribution(self) -> dict:
        counts = {m: 0 for m in MODULES}
        for t in self.trials:
            if t["first_failure"]:
                counts[t["first_failure"]] += 1
        return counts

    def summary(self) -> dict:
        return {"hardened": self.hardened, "trials": self.n,
                "attacker_success_rate": round(self.success_rate, 4),
                "failures": self.failure_attribution}

    def write(self, path):
        path = Path(path)
        path.write_text(json.dumps({"summary": self.summary(), "trials": self.trials},
                                   indent=1) + "\n")
        rows = [{"module": m, "failures": c} for m, c in self.failure_attribution.items()]
        emit_report(rows, path.with_suffix(".csv"), "csv")


def run_attack_scenario(assets: dict, pipeline: PipelineConfig, n_trials: int,
                        seed: int = 0, response_latency_s: float = 0.5) -> ScenarioReport:
    """Issue ``n_trials`` challenges; the attacker answers each with a pre-made
    adversarial sample for that task (``assets``: task -> list of AttackerAsset).

    A task without assets is a time-out. Assets are used round-robin.
    """
    issuer = ChallengeIssuer(seed)
    used = {t: 0 for t in TASKS}
    trials = []
    for _ in range(n_trials):
        c = issuer.issue()
        pool = assets.get(c.task_kind) or []
        if not pool:
            s = verify_response(AudioBuffer(np.zeros(1)), c, None, None, pipeline)
        else:
            a = pool[used[c.task_kind] % len(pool)]
            used[c.task_kind] += 1
            s = verify_response(a.a0, c, a.response, response_latency_s, pipeline)
        trials.append(s.record())
    return ScenarioReport(trials, pipeline.hardened)
