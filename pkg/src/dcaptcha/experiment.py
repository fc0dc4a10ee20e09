"""Experiment stages behind the command line.

Stages communicate only through files under the output directory:

    corpus/     gen-corpus   defender and attacker WAV trees
    models/     train        detectors, task classifiers, surrogate
    attack/     attack       stage-1/stage-2 adversarial samples
    advtrain/   advtrain     hardened models, robustness table
    transfer/   transfer-eval
    pipeline/   pipeline-sim
    report/     report

Every stage writes ``<dir>/stage.json`` with its config hash, the corpus
hash it consumed and a digest of each output file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .advtrain import AdvTrainConfig, adversarial_train, robust_evaluate
from .attack import AttackConfig, stage1_batch, stage2_batch
from .audio import AudioBuffer, FrameSpec, read_wav, write_wav
from .corpus import TASKS, SyntheticCorpusSpec, generate, write_corpus
from .features import FeatureSpec
from .metrics import emit_report, markdown_table, score_labels
from .models import (
    FAKE,
    REAL,
    Dataset,
    ModelConfig,
    build_model,
    load_checkpoint,
    predict_labels,
    save_checkpoint,
    train,
)
from .pipeline import AttackerAsset, PipelineConfig, run_attack_scenario
from .psychoacoustics import global_masking_threshold, perceptual_margin
from .transfer import QueryBudget, SurrogateConfig, build_surrogate, evaluate_transfer

OUT_ENV = "DCAPTCHA_OUT"
STAGES = ("gen-corpus", "train", "attack", "transfer-eval", "advtrain", "pipeline-sim", "report")


class ConfigError(ValueError):
    exit_code = 2


class MissingArtifact(FileNotFoundError):
    exit_code = 3


class InvariantViolation(RuntimeError):
    exit_code = 4


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainSpec:
    model: ModelConfig
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-2
    loss_kind: str = "cross_entropy"

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "epochs": self.epochs,
                "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                "loss_kind": self.loss_kind}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        d = dict(d)
        d["model"] = _model_config(d["model"])
        return cls(**d)


def _model_config(d: dict) -> ModelConfig:
    d = dict(d)
    if isinstance(d.get("frontend"), str):
        d["frontend"] = {"kind": d["frontend"]}
    d.setdefault("widths", [])
    return ModelConfig.from_dict(d)


def _spec(arch, frontend, widths=(), seed=0, classes=2, **kw) -> TrainSpec:
    return TrainSpec(ModelConfig(arch, FeatureSpec(frontend), widths, classes, seed), **kw)


def _default_detectors():
    return {
        "lfcc_mlp": _spec("mlp", "lfcc", (64,), 1, epochs=30, learning_rate=3e-3),
        "raw": _spec("raw_conv", "raw", (16, 16), 2, epochs=20, learning_rate=3e-3),
    }


def _default_task_classifiers():
    n = len(TASKS)
    return {
        "gmm": _spec("gmm", "mfcc", (8,), 3, n),
        "spec_conv": _spec("compact_conv", "spectrogram", (8, 16), 4, n, epochs=15),
    }


@dataclass(frozen=True)
class ExperimentConfig:
    """One JSON document per experiment; see ``default_config()`` for the shape."""

    seed: int = 0
    corpus: SyntheticCorpusSpec = SyntheticCorpusSpec(n_per_task=200, duration_s=1.0)
    detectors: dict = field(default_factory=_default_detectors)
    task_classifiers: dict = field(default_factory=_default_task_classifiers)
    query_target: str = "raw"
    query_budget: int = 2000
    surrogate: SurrogateConfig = SurrogateConfig()
    attack: AttackConfig = AttackConfig(stage2_iters=100)
    attack_samples: int = 500  # stage 1 runs on this many attacker-side fakes
    stage2_per_task: int = 40  # stage-1 successes refined per task
    chunk: int = 50  # rows per batched stage-2 call
    high_confidence_quantile: float = 0.5
    # radius below the corpus noise floor; see the ledger
    advtrain: AdvTrainConfig = AdvTrainConfig(batch_size=32, epsilon=0.002,
                                              pgd_step_size=0.0005, monitor_steps=5)
    advtrain_steps: tuple = (20, 40)
    harden: tuple = ("lfcc_mlp", "raw", "spec_conv")
    advtrain_epochs: dict = field(default_factory=lambda: {"lfcc_mlp": 10, "raw": 4,
                                                           "spec_conv": 5})
    advtrain_init: str = "standard"  # fine-tune the standard weights, or "scratch"
    inherit_optimizer: bool = False  # reuse each model's learning rate and batch size
    robust_eval_steps: int = 20
    realism_detector: str = "lfcc_mlp"
    pipeline_task_classifier: str = "spec_conv"
    identity_threshold: float = 0.7
    pipeline_trials: int = 200
    output_dir: str | None = None

    def __post_init__(self):
        for name in list(self.detectors) + list(self.task_classifiers):
            if not name.replace("_", "").isalnum():
                raise ConfigError(f"model name {name!r} must be alphanumeric/underscore")
        if self.query_target not in self.detectors:
            raise ConfigError(f"query_target {self.query_target!r} is not a detector")
        if self.realism_detector not in self.detectors:
            raise ConfigError(f"realism_detector {self.realism_detector!r} is not a detector")
        if self.pipeline_task_classifier not in self.task_classifiers:
            raise ConfigError("pipeline_task_classifier must name a task classifier")
        for d in self.detectors.values():
            if d.model.class_count != 2:
                raise ConfigError("detectors are binary")
        for t in self.task_classifiers.values():
            if t.model.class_count != len(TASKS):
                raise ConfigError(f"task classifiers need class_count = {len(TASKS)}")
        known = set(self.detectors) | set(self.task_classifiers)
        for h in self.harden:
            if h not in known:
                raise ConfigError(f"harden lists unknown model {h!r}")
            if h in self.task_classifiers and self.task_classifiers[h].model.architecture == "gmm":
                raise ConfigError("a GMM has no input gradient path to train against PGD")
        if self.advtrain_init not in ("standard", "scratch"):
            raise ConfigError("advtrain_init must be 'standard' or 'scratch'")
        if any(int(e) < 1 for e in self.advtrain_epochs.values()):
            raise ConfigError("advtrain_epochs must be positive")
        if not self.advtrain_steps or min(self.advtrain_steps) < 1:
            raise ConfigError("advtrain_steps must be positive integers")
        if not 0.0 < self.high_confidence_quantile < 1.0:
            raise ConfigError("high_confidence_quantile must lie in (0, 1)")
        if self.attack_samples < 1 or self.stage2_per_task < 1 or self.chunk < 1:
            raise ConfigError("sample counts must be positive")
        if self.pipeline_trials < 0 or self.query_budget < 0:
            raise ConfigError("counts must be non-negative")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["corpus"] = self.corpus.to_dict()
        d["detectors"] = {k: v.to_dict() for k, v in self.detectors.items()}
        d["task_classifiers"] = {k: v.to_dict() for k, v in self.task_classifiers.items()}
        d["surrogate"] = self.surrogate.to_dict()
        d["attack"] = self.attack.to_dict()
        d["advtrain"] = self.advtrain.to_dict()
        d["advtrain_steps"] = list(self.advtrain_steps)
        d["harden"] = list(self.harden)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "corpus" in d:
                d["corpus"] = SyntheticCorpusSpec.from_dict(d["corpus"])
            for key in ("detectors", "task_classifiers"):
                if key in d:
                    d[key] = {k: TrainSpec.from_dict(v) for k, v in d[key].items()}
            if "surrogate" in d:
                d["surrogate"] = SurrogateConfig.from_dict(d["surrogate"])
            if "attack" in d:
                d["attack"] = AttackConfig(**d["attack"])
            if "advtrain" in d:
                d["advtrain"] = AdvTrainConfig.from_dict(d["advtrain"])
            for key in ("advtrain_steps", "harden"):
                if key in d:
                    d[key] = tuple(d[key])
            return cls(**d)
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError, AttributeError) as e:
            raise ConfigError(f"invalid config: {e}") from e

    def section(self, *keys) -> dict:
        full = self.to_dict()
        return {"seed": self.seed, **{k: full[k] for k in keys}}


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return ExperimentConfig.from_dict(raw)


def resolve_out(config: ExperimentConfig, cli_out: str | None) -> Path:
    """``--out`` wins, then the environment override, then the config."""
    out = cli_out or os.environ.get(OUT_ENV) or config.output_dir
    if not out:
        raise ConfigError(f"no output directory: pass --out, set {OUT_ENV} or output_dir")
    return Path(out)


# ---------------------------------------------------------------------------
# provenance


def canonical_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def derive_seed(seed: int, label: str) -> int:
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _dump(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_stage(directory: Path, stage: str, config_hash: str, corpus_hash: str,
                outputs, upstream: dict | None = None) -> dict:
    manifest = {
        "stage": stage,
        "config_hash": config_hash,
        "corpus_hash": corpus_hash,
        "upstream": upstream or {},
        "outputs": {Path(p).relative_to(directory).as_posix(): file_digest(p)
                    for p in sorted(map(str, outputs))},
    }
    _dump(directory / "stage.json", manifest)
    return manifest


def read_stage(out: Path, sub: str, needed_by: str) -> dict:
    path = out / sub / "stage.json"
    if not path.exists():
        raise MissingArtifact(f"{needed_by}: missing upstream stage manifest {path}")
    return json.loads(path.read_text())


def require(path: Path, needed_by: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{needed_by}: missing artifact {path}")
    return path


def _same_corpus(stages: dict, who: str) -> str:
    hashes = {s["corpus_hash"] for s in stages.values()}
    if len(hashes) != 1:
        detail = ", ".join(f"{k}={v['corpus_hash'][:12]}" for k, v in stages.items())
        raise InvariantViolation(f"{who}: stages disagree on the corpus ({detail})")
    return hashes.pop()


# ---------------------------------------------------------------------------
# corpus

ROLES = ("defender", "attacker")


def gen_corpus(config: ExperimentConfig, out: Path) -> dict:
    base = out / "corpus"
    files = []
    for role in ROLES:
        corpus = generate(config.corpus, derive_seed(config.seed, f"corpus/{role}"))
        manifest = write_corpus(corpus, base / role)
        files.append(manifest)
        files += sorted((base / role).glob("*/*/*.wav"))
    corpus_hash = hashlib.sha256(
        "".join(file_digest(f) for f in files).encode()).hexdigest()
    return write_stage(base, "gen-corpus", canonical_hash(config.section("corpus")),
                       corpus_hash, [base / r / "manifest.json" for r in ROLES])


@dataclass
class LoadedCorpus:
    X: np.ndarray
    task: np.ndarray  # task index
    fake: np.ndarray
    split: np.ndarray
    speaker: np.ndarray
    paths: list

    def rows(self, split=None, fake=None):
        m = np.ones(len(self.X), bool)
        if split is not None:
            m &= np.isin(self.split, np.atleast_1d(split))
        if fake is not None:
            m &= self.fake == fake
        return np.flatnonzero(m)

    def detector_data(self, split) -> Dataset:
        idx = self.rows(split)
        return Dataset(self.X[idx], self.fake[idx].astype(int))

    def task_data(self, split) -> Dataset:
        idx = self.rows(split)
        return Dataset(self.X[idx], self.task[idx])


def load_corpus(out: Path, role: str, needed_by: str) -> LoadedCorpus:
    root = out / "corpus" / role
    manifest = json.loads(require(root / "manifest.json", needed_by).read_text())
    clips = manifest["clips"]
    X = np.stack([read_wav(require(root / c["path"], needed_by)).samples for c in clips])
    return LoadedCorpus(
        X,
        np.array([TASKS.index(c["task"]) for c in clips]),
        np.array([c["label"] == "fake" for c in clips]),
        np.array([c["split"] for c in clips]),
        np.array([c["speaker"] for c in clips]),
        [c["path"] for c in clips],
    )


# ---------------------------------------------------------------------------
# train


def _seeded(spec: TrainSpec, seed: int, name: str) -> TrainSpec:
    return replace(spec, model=replace(spec.model, seed=derive_seed(seed, f"model/{name}")))


def _fit(spec: TrainSpec, train_data, val_data):
    return train(build_model(spec.model), train_data, spec.epochs, spec.batch_size,
                 spec.learning_rate, spec.loss_kind, val=val_data)


def train_stage(config: ExperimentConfig, out: Path) -> dict:
    who = "train"
    corpus_stage = read_stage(out, "corpus", who)
    d = out / "models"
    d.mkdir(parents=True, exist_ok=True)
    defender = load_corpus(out, "defender", who)
    outputs, summary = [], {"detectors": {}, "task_classifiers": {}}
    detectors = {}
    for name, spec in config.detectors.items():
        model, hist = _fit(_seeded(spec, config.seed, name),
                           defender.detector_data("train"), defender.detector_data("val"))
        test = defender.detector_data("test")
        f = score_labels(test.y, predict_labels(model, test.X))
        path = d / f"det_{name}.ckpt"
        save_checkpoint(model, path, {"role": "detector", "test_f1": f, "robust": False})
        outputs.append(path)
        detectors[name] = model
        summary["detectors"][name] = {"test_f1": f, "best_epoch": hist.best_epoch}
    for name, spec in config.task_classifiers.items():
        model, hist = _fit(_seeded(spec, config.seed, name),
                           defender.task_data("train"), defender.task_data("val"))
        test = defender.task_data("test")
        pred = predict_labels(model, test.X)
        f = score_labels(test.y, pred, len(TASKS))
        path = d / f"cls_{name}.ckpt"
        save_checkpoint(model, path, {"role": "task_classifier", "test_macro_f1": f,
                                      "robust": False})
        outputs.append(path)
        summary["task_classifiers"][name] = {
            "test_macro_f1": f, "test_accuracy": float(np.mean(pred == test.y)),
            "best_epoch": hist.best_epoch}

    # attacker side: label its own recordings by querying the deployed detector
    attacker = load_corpus(out, "attacker", who)
    idx = attacker.rows(["train", "val"])
    budget = QueryBudget(config.query_budget)
    sur_cfg = replace(config.surrogate,
                      model=replace(config.surrogate.model,
                                    seed=derive_seed(config.seed, "model/surrogate")),
                      seed=derive_seed(config.seed, "surrogate/split"))
    sur = build_surrogate(attacker.X[idx], detectors[config.query_target], budget, sur_cfg)
    path = d / "surrogate.ckpt"
    save_checkpoint(sur.model, path, {"role": "surrogate", "query_count": sur.query_count,
                                      "query_target": config.query_target})
    outputs.append(path)
    hold = sur.holdout
    summary["surrogate"] = {
        "query_count": sur.query_count,
        "holdout_agreement": float(np.mean(predict_labels(sur.model, hold.X) == hold.y)),
        "best_epoch": sur.history.best_epoch,
    }
    _dump(d / "summary.json", summary)
    outputs.append(d / "summary.json")
    section = config.section("detectors", "task_classifiers", "query_target",
                             "query_budget", "surrogate")
    return write_stage(d, who, canonical_hash(section), corpus_stage["corpus_hash"], outputs,
                       {"gen-corpus": corpus_stage["config_hash"]})


def load_models(out: Path, names, prefix: str, needed_by: str, sub: str = "models") -> dict:
    return {n: load_checkpoint(require(out / sub / f"{prefix}_{n}.ckpt", needed_by))
            for n in names}


# ---------------------------------------------------------------------------
# attack


def attack_rows(corpus: LoadedCorpus, count: int) -> np.ndarray:
    """Attacker fakes, interleaved by task so any prefix stays balanced."""
    per_task = [corpus.rows(fake=True)[corpus.task[corpus.rows(fake=True)] == k]
                for k in range(len(TASKS))]
    order = [r for group in zip(*per_task) for r in group]
    if count > len(order):
        raise InvariantViolation(
            f"attack: asked for {count} fakes, the attacker corpus has {len(order)}")
    return np.array(order[:count])


def attack_stage(config: ExperimentConfig, out: Path) -> dict:
    who = "attack"
    models_stage = read_stage(out, "models", who)
    surrogate = load_checkpoint(require(out / "models" / "surrogate.ckpt", who))
    attacker = load_corpus(out, "attacker", who)
    rows = attack_rows(attacker, config.attack_samples)
    X = attacker.X[rows]
    cfg = config.attack
    delta1 = np.zeros_like(X)
    probs1 = np.zeros((len(X), 2))
    for i in range(0, len(X), config.chunk):
        delta1[i:i + config.chunk], probs1[i:i + config.chunk] = stage1_batch(
            surrogate, X[i:i + config.chunk], cfg)
    success1 = probs1.argmax(1) == cfg.target_label

    # stage 2 on the first stage2_per_task successes of each task
    tasks = attacker.task[rows]
    picked = np.concatenate([np.flatnonzero(success1 & (tasks == k))[:config.stage2_per_task]
                             for k in range(len(TASKS))])
    picked.sort()
    spec = FrameSpec()
    thresholds = [global_masking_threshold(AudioBuffer(x), spec) for x in X[picked]]
    vf1 = np.array([perceptual_margin(AudioBuffer(d), t).violation_fraction
                    for d, t in zip(delta1[picked], thresholds)])
    delta2 = np.zeros((len(picked), X.shape[1]))
    probs2 = np.zeros((len(picked), 2))
    vf2 = np.zeros(len(picked))
    best = np.zeros(len(picked), dtype=int)
    for i in range(0, len(picked), config.chunk):
        sl = slice(i, i + config.chunk)
        delta2[sl], probs2[sl], vf2[sl], best[sl], _ = stage2_batch(
            surrogate, X[picked][sl], delta1[picked][sl], thresholds[sl], cfg)
    if np.any(vf2 > vf1 + 1e-12):
        raise InvariantViolation("attack: stage 2 returned an iterate worse than its seed")

    d = out / "attack"
    (d / "wav").mkdir(parents=True, exist_ok=True)
    npz = d / "adversarial.npz"
    with open(npz, "wb") as fh:
        np.savez(fh, rows=rows, task=tasks, inputs=X, delta1=delta1, probs1=probs1,
                 picked=picked, delta2=delta2, probs2=probs2, vf1=vf1, vf2=vf2,
                 best_index=best)
    outputs = [npz]
    for j, r in enumerate(picked):
        stem = d / "wav" / f"{j:04d}_{TASKS[tasks[r]]}"
        write_wav(AudioBuffer(X[r] + delta2[j]), stem.with_suffix(".wav"))
        _dump(stem.with_suffix(".json"), {
            "source": attacker.paths[rows[r]], "task": TASKS[tasks[r]],
            "surrogate_confidence": float(probs2[j, cfg.target_label]),
            "violation_fraction_stage1": float(vf1[j]),
            "violation_fraction": float(vf2[j]), "best_iteration": int(best[j]),
            "max_abs_perturbation": float(np.abs(delta2[j]).max()),
            "attack_config": cfg.to_dict()})
    summary = {
        "stage1_attempted": int(len(X)),
        "stage1_success": int(success1.sum()),
        "self_asr": 100.0 * float(success1.mean()),
        "stage2_samples": int(len(picked)),
        "stage2_self_asr": 100.0 * float(np.mean(probs2.argmax(1) == cfg.target_label)),
        "median_violation_stage1": float(np.median(vf1)),
        "median_violation_stage2": float(np.median(vf2)),
        "stage2_not_worse": bool(np.all(vf2 <= vf1 + 1e-12)),
        "max_abs_perturbation_median": float(np.median(np.abs(delta2).max(1))),
    }
    _dump(d / "summary.json", summary)
    outputs.append(d / "summary.json")
    return write_stage(d, who, canonical_hash(config.section(
        "attack", "attack_samples", "stage2_per_task", "chunk")),
        models_stage["corpus_hash"], outputs, {"train": models_stage["config_hash"]})


@dataclass
class AttackAssets:
    inputs: np.ndarray  # clean fakes that went through stage 2
    adversarial: np.ndarray
    perturbation: np.ndarray
    confidence: np.ndarray
    task: np.ndarray  # task names
    attacker_rows: np.ndarray  # row index into the attacker corpus


def load_assets(out: Path, needed_by: str) -> AttackAssets:
    z = np.load(require(out / "attack" / "adversarial.npz", needed_by))
    sel = z["picked"]
    X = z["inputs"][sel]
    return AttackAssets(X, X + z["delta2"], z["delta2"], z["probs2"][:, REAL],
                        np.array([TASKS[k] for k in z["task"][sel]]), z["rows"][sel])


# ---------------------------------------------------------------------------
# advtrain


def _harden_spec(config: ExperimentConfig, name: str):
    spec = config.detectors.get(name) or config.task_classifiers[name]
    return _seeded(spec, config.seed, name), name in config.detectors


def advtrain_stage(config: ExperimentConfig, out: Path) -> dict:
    who = "advtrain"
    models_stage = read_stage(out, "models", who)
    defender = load_corpus(out, "defender", who)
    d = out / "advtrain"
    d.mkdir(parents=True, exist_ok=True)
    outputs, rows = [], []
    standard = {**load_models(out, config.detectors, "det", who),
                **load_models(out, config.task_classifiers, "cls", who)}
    for name in config.harden:
        spec, is_det = _harden_spec(config, name)
        data = defender.detector_data if is_det else defender.task_data
        test = data("test")
        r = robust_evaluate(standard[name], test, config.advtrain.epsilon,
                            config.robust_eval_steps)
        rows.append({"model": name, "training": "standard", **asdict(r)})
        for t in config.advtrain_steps:
            at = replace(config.advtrain, pgd_steps=t,
                         epochs=int(config.advtrain_epochs.get(name, config.advtrain.epochs)))
            if config.inherit_optimizer:
                at = replace(at, learning_rate=spec.learning_rate, batch_size=spec.batch_size)
            start = (copy.deepcopy(standard[name]) if config.advtrain_init == "standard"
                     else build_model(spec.model))
            model, hist = adversarial_train(start, data("train"), at, val=data("val"))
            path = d / f"{'det' if is_det else 'cls'}_{name}_t{t}.ckpt"
            save_checkpoint(model, path, {"robust": True, "advtrain_config": at.to_dict(),
                                          "history": hist.to_dict()})
            outputs.append(path)
            r = robust_evaluate(model, test, config.advtrain.epsilon, config.robust_eval_steps)
            rows.append({"model": name, "training": f"t{t}", **asdict(r)})
    emit_report(rows, d / "robustness.csv", "csv")
    outputs.append(d / "robustness.csv")
    section = config.section("advtrain", "advtrain_steps", "harden", "inherit_optimizer",
                             "advtrain_epochs", "advtrain_init",
                             "robust_eval_steps", "detectors", "task_classifiers")
    return write_stage(d, who, canonical_hash(section), models_stage["corpus_hash"],
                       outputs, {"train": models_stage["config_hash"]})


def model_sets(config: ExperimentConfig, out: Path, needed_by: str) -> dict:
    """Configurations to compare: "standard" plus one per PGD step count when
    hardened models exist. Models that were not hardened are reused."""
    det = load_models(out, config.detectors, "det", needed_by)
    cls = load_models(out, config.task_classifiers, "cls", needed_by)
    sets = {"standard": (det, cls)}
    if (out / "advtrain" / "stage.json").exists():
        for t in config.advtrain_steps:
            hd, hc = dict(det), dict(cls)
            for name in config.harden:
                if name in hd:
                    hd[name] = load_checkpoint(require(
                        out / "advtrain" / f"det_{name}_t{t}.ckpt", needed_by))
                else:
                    hc[name] = load_checkpoint(require(
                        out / "advtrain" / f"cls_{name}_t{t}.ckpt", needed_by))
            sets[f"t{t}"] = (hd, hc)
    return sets


# ---------------------------------------------------------------------------
# transfer-eval


def noise_control(perturbation: np.ndarray, seed: int) -> np.ndarray:
    """Uniform noise rescaled to each row's perturbation max-norm."""
    rng = np.random.default_rng(seed)
    n = rng.uniform(-1.0, 1.0, perturbation.shape)
    return n * (np.abs(perturbation).max(1) / np.abs(n).max(1))[:, None]


def flip_asr(clean_rejected: np.ndarray, passed: np.ndarray) -> float | None:
    """Percent of fakes rejected when clean that pass once attacked."""
    n = int(clean_rejected.sum())
    return round(100.0 * float(np.sum(clean_rejected & passed)) / n, 4) if n else None


def transfer_stage(config: ExperimentConfig, out: Path) -> dict:
    who = "transfer-eval"
    attack_stage_m = read_stage(out, "attack", who)
    models_stage = read_stage(out, "models", who)
    upstream = {"attack": attack_stage_m, "train": models_stage}
    if (out / "advtrain" / "stage.json").exists():
        upstream["advtrain"] = read_stage(out, "advtrain", who)
    corpus_hash = _same_corpus(upstream, who)
    assets = load_assets(out, who)
    a_sum = json.loads(require(out / "attack" / "summary.json", who).read_text())
    q_sum = json.loads(require(out / "models" / "summary.json", who).read_text())
    threshold = float(np.quantile(assets.confidence, config.high_confidence_quantile))
    d = out / "transfer"
    d.mkdir(parents=True, exist_ok=True)
    outputs, flips, preservation = [], [], []
    noisy = assets.inputs + noise_control(assets.perturbation,
                                          derive_seed(config.seed, "noise-control"))
    for label, (det, cls) in model_sets(config, out, who).items():
        rep = evaluate_transfer(assets.adversarial, assets.confidence, assets.task, det, cls,
                                np.ones(len(assets.task), bool), threshold,
                                q_sum["surrogate"]["query_count"])
        rep.self_asr = a_sum["self_asr"]
        rep.write(d, f"transfer_{label}")
        outputs += [d / f"transfer_{label}.{ext}" for ext in ("csv", "json")]
        outputs.append(d / f"transfer_{label}_verdicts.jsonl")
        # flip ASR: only fakes each detector catches when unperturbed
        rejected = {n: predict_labels(m, assets.inputs) == FAKE for n, m in det.items()}
        high = assets.confidence >= threshold
        for target, ok in _chain_passes(det, cls, assets).items():
            rej = rejected[target.split("->")[0]]
            flips.append({"models": label, "target": target,
                          "clean_rejected": int(rej.sum()),
                          "flip_asr": flip_asr(rej, ok),
                          "flip_asr_high_conf": flip_asr(rej & high, ok),
                          "flip_asr_low_conf": flip_asr(rej & ~high, ok),
                          "asr": round(100.0 * float(ok.mean()), 4)})
        if label == "standard":
            for cname, cm in cls.items():
                adv_pred = predict_labels(cm, assets.adversarial)
                noise_pred = predict_labels(cm, noisy)
                clean_pred = predict_labels(cm, assets.inputs)
                for t in TASKS:
                    sel = assets.task == t
                    k = TASKS.index(t)
                    preservation.append({
                        "classifier": cname, "task": t, "n": int(sel.sum()),
                        "clean": round(100.0 * float(np.mean(clean_pred[sel] == k)), 4),
                        "adversarial": round(100.0 * float(np.mean(adv_pred[sel] == k)), 4),
                        "noise_control": round(100.0 * float(np.mean(noise_pred[sel] == k)), 4),
                    })
    emit_report(flips, d / "flip_asr.csv", "csv")
    emit_report(preservation, d / "task_preservation.csv", "csv")
    _dump(d / "strata.json", {"high_confidence_threshold": threshold,
                              "quantile": config.high_confidence_quantile})
    outputs += [d / "flip_asr.csv", d / "task_preservation.csv", d / "strata.json"]
    return write_stage(d, who, canonical_hash(config.section("high_confidence_quantile")),
                       corpus_hash, outputs,
                       {k: v["config_hash"] for k, v in upstream.items()})


def _chain_passes(det: dict, cls: dict, assets: AttackAssets) -> dict:
    passed = {n: predict_labels(m, assets.adversarial) == REAL for n, m in det.items()}
    out = dict(passed)
    for cname, cm in cls.items():
        hit = np.array([TASKS[p] == t for p, t in
                        zip(predict_labels(cm, assets.adversarial), assets.task)])
        for dn in det:
            out[f"{dn}->{cname}"] = passed[dn] & hit
    return out


# ---------------------------------------------------------------------------
# pipeline-sim


def scenario_assets(assets: AttackAssets, attacker: LoadedCorpus) -> dict:
    """Per task, (a0, response) pairs. a0 is another fake clip by the same
    synthetic speaker, standing in for the converted greeting."""
    pool = {}
    speech = attacker.rows(fake=True)
    for j, r in enumerate(assets.attacker_rows):
        spk = attacker.speaker[r]
        same = speech[(attacker.speaker[speech] == spk) & (speech != r)
                      & (attacker.task[speech] == TASKS.index("speak_emotion"))]
        if not len(same):
            continue
        a0 = AudioBuffer(attacker.X[same[0]])
        pool.setdefault(assets.task[j], []).append(
            AttackerAsset(a0, AudioBuffer(assets.adversarial[j])))
    return pool


def genuine_assets(defender: LoadedCorpus) -> dict:
    """Held-out bona fide responses, each paired with a bona fide
    speak_emotion clip by the same speaker as a0."""
    pool = {}
    real = defender.rows(fake=False)
    speech = real[defender.task[real] == TASKS.index("speak_emotion")]
    for r in defender.rows(fake=False, split="test"):
        same = speech[(defender.speaker[speech] == defender.speaker[r]) & (speech != r)]
        if len(same):
            pool.setdefault(TASKS[defender.task[r]], []).append(
                AttackerAsset(AudioBuffer(defender.X[same[0]]), AudioBuffer(defender.X[r])))
    return pool


def pipeline_stage(config: ExperimentConfig, out: Path) -> dict:
    who = "pipeline-sim"
    upstream = {"attack": read_stage(out, "attack", who),
                "train": read_stage(out, "models", who)}
    if (out / "advtrain" / "stage.json").exists():
        upstream["advtrain"] = read_stage(out, "advtrain", who)
    corpus_hash = _same_corpus(upstream, who)
    assets = scenario_assets(load_assets(out, who), load_corpus(out, "attacker", who))
    d = out / "pipeline"
    d.mkdir(parents=True, exist_ok=True)
    outputs, rows = [], []
    for label, (det, cls) in model_sets(config, out, who).items():
        pipe = PipelineConfig.from_classifier(
            det[config.realism_detector], cls[config.pipeline_task_classifier],
            identity_threshold=config.identity_threshold, hardened=label != "standard")
        rep = run_attack_scenario(assets, pipe, config.pipeline_trials,
                                  derive_seed(config.seed, "scenario"))
        rep.write(d / f"scenario_{label}.json")
        outputs += [d / f"scenario_{label}.json", d / f"scenario_{label}.csv"]
        rows.append({"models": label, **{k: v for k, v in rep.summary().items()
                                         if k != "failures"},
                     **{f"fail_{m}": c for m, c in rep.failure_attribution.items()}})
    # genuine callers through the standard pipeline (false-reject check)
    det, cls = model_sets(config, out, who)["standard"]
    pipe = PipelineConfig.from_classifier(det[config.realism_detector],
                                          cls[config.pipeline_task_classifier],
                                          identity_threshold=config.identity_threshold)
    rep = run_attack_scenario(genuine_assets(load_corpus(out, "defender", who)), pipe,
                              config.pipeline_trials, derive_seed(config.seed, "genuine"))
    rep.write(d / "genuine_standard.json")
    outputs += [d / "genuine_standard.json", d / "genuine_standard.csv"]
    rows.append({"models": "genuine", **{k: v for k, v in rep.summary().items()
                                         if k != "failures"},
                 **{f"fail_{m}": c for m, c in rep.failure_attribution.items()}})
    emit_report(rows, d / "scenarios.csv", "csv")
    outputs.append(d / "scenarios.csv")
    section = config.section("realism_detector", "pipeline_task_classifier",
                             "identity_threshold", "pipeline_trials")
    return write_stage(d, who, canonical_hash(section), corpus_hash, outputs,
                       {k: v["config_hash"] for k, v in upstream.items()})


# ---------------------------------------------------------------------------
# report


def _read_csv(path):
    from .metrics import read_csv_records

    return read_csv_records(path)


def _num(v):
    if v in ("", None):
        return None
    try:
        return float(v)
    except ValueError:
        return v


def pooled_flip(flips: list, models: str, targets) -> float | None:
    """Flip ASR pooled over ``targets`` (sum of flips / sum of clean rejections)."""
    hit = rej = 0.0
    for r in flips:
        if r["models"] == models and r["target"] in targets and r["flip_asr"] is not None:
            n = float(r["clean_rejected"])
            rej += n
            hit += float(r["flip_asr"]) * n / 100.0
    return round(100.0 * hit / rej, 4) if rej else None


def report_stage(config: ExperimentConfig, out: Path) -> dict:
    who = "report"
    stages = {"gen-corpus": read_stage(out, "corpus", who),
              "train": read_stage(out, "models", who),
              "attack": read_stage(out, "attack", who),
              "transfer-eval": read_stage(out, "transfer", who)}
    for sub, name in (("advtrain", "advtrain"), ("pipeline", "pipeline-sim")):
        if (out / sub / "stage.json").exists():
            stages[name] = read_stage(out, sub, who)
    corpus_hash = _same_corpus(stages, who)
    models_sum = json.loads((out / "models" / "summary.json").read_text())
    attack_sum = json.loads((out / "attack" / "summary.json").read_text())
    strata = json.loads((out / "transfer" / "strata.json").read_text())
    std = json.loads((out / "transfer" / "transfer_standard.json").read_text())
    flips = [{k: _num(v) if k not in ("models", "target") else v for k, v in r.items()}
             for r in _read_csv(out / "transfer" / "flip_asr.csv")]
    preservation = [{k: _num(v) if k not in ("classifier", "task") else v
                     for k, v in r.items()}
                    for r in _read_csv(out / "transfer" / "task_preservation.csv")]
    det_names = list(config.detectors)
    summary = {
        "corpus_hash": corpus_hash,
        "models": models_sum,
        "attack": attack_sum,
        "high_confidence_threshold": strata["high_confidence_threshold"],
        "transfer": {r["target"]: {"asr": r["asr"], "asr_high_conf": r["asr_high_conf"],
                                   "asr_low_conf": r["asr_low_conf"]}
                     for r in std["rows"] if r["task"] == "all"},
        "flip": flips,
        "task_preservation": preservation,
    }
    d = out / "report"
    d.mkdir(parents=True, exist_ok=True)
    md = ["# Experiment report", "",
          f"Seed {config.seed}. Corpus hash `{corpus_hash[:16]}`.", "",
          "## Models (test split)", "",
          markdown_table([{"model": k, "role": "detector", "score": round(v["test_f1"], 4)}
                          for k, v in models_sum["detectors"].items()]
                         + [{"model": k, "role": "task classifier (macro F1)",
                             "score": round(v["test_macro_f1"], 4)}
                            for k, v in models_sum["task_classifiers"].items()]), "",
          "## Surrogate and transfer", "",
          f"Queries used to label the surrogate's data: {models_sum['surrogate']['query_count']}.",
          "",
          markdown_table([{"target": "surrogate (self)", "asr": round(attack_sum["self_asr"], 2)}]
                         + [{"target": t, "asr": v["asr"]}
                            for t, v in summary["transfer"].items() if "->" not in t]), "",
          "## Transfer by task (detector, then detector followed by task classifier)", "",
          _pivot(std["rows"]), "",
          f"## Confidence strata (high means surrogate confidence >= "
          f"{strata['high_confidence_threshold']:.6f})", "",
          markdown_table([{"target": r["target"], "flip_high": r["flip_asr_high_conf"],
                           "flip_low": r["flip_asr_low_conf"],
                           "pass_high": summary["transfer"][r["target"]]["asr_high_conf"],
                           "pass_low": summary["transfer"][r["target"]]["asr_low_conf"]}
                          for r in flips if r["models"] == "standard"]), "",
          "## Flip ASR (fakes rejected when clean that pass once attacked, %)", "",
          markdown_table([{k: r[k] for k in ("models", "target", "clean_rejected", "flip_asr")}
                          for r in flips]), "",
          "## Task preservation (positive rate, %)", "",
          markdown_table(preservation), "",
          "## Imperceptibility", "",
          markdown_table([{"stage": "1", "median_violation_fraction":
                           round(attack_sum["median_violation_stage1"], 6)},
                          {"stage": "2", "median_violation_fraction":
                           round(attack_sum["median_violation_stage2"], 6)}]), ""]
    if "advtrain" in stages:
        labels = ["standard"] + [f"t{t}" for t in config.advtrain_steps]
        defense = []
        for label in labels:
            row = {"models": label, "detectors_flip_asr": pooled_flip(flips, label, det_names)}
            for c in config.task_classifiers:
                row[f"chain_{c}_flip_asr"] = pooled_flip(
                    flips, label, [f"{dn}->{c}" for dn in det_names])
            defense.append(row)
        robustness = [{k: _num(v) if k not in ("model", "training") else v
                       for k, v in r.items()}
                      for r in _read_csv(out / "advtrain" / "robustness.csv")]
        summary["defense"] = defense
        summary["robustness"] = robustness
        md += ["## Before and after adversarial training (flip ASR, %)", "",
               markdown_table(defense), "",
               "## White-box PGD robustness (test split)", "",
               markdown_table(robustness), ""]
    if "pipeline-sim" in stages:
        scen = [{k: _num(v) if k != "models" else v for k, v in r.items()}
                for r in _read_csv(out / "pipeline" / "scenarios.csv")]
        summary["scenarios"] = scen
        md += ["## End-to-end scenarios", "", markdown_table(scen), ""]
    _dump(d / "summary.json", summary)
    (d / "report.md").write_text("\n".join(md))
    outputs = [d / "summary.json", d / "report.md"]
    return write_stage(d, who, canonical_hash(config.to_dict() | {"output_dir": None}),
                       corpus_hash, outputs, {k: v["config_hash"] for k, v in stages.items()})


def _pivot(rows) -> str:
    from .metrics import pivot_table

    return pivot_table([r for r in rows if r["task"] != "all"], "task", "target", "asr")


RUNNERS = {
    "gen-corpus": gen_corpus,
    "train": train_stage,
    "attack": attack_stage,
    "transfer-eval": transfer_stage,
    "advtrain": advtrain_stage,
    "pipeline-sim": pipeline_stage,
    "report": report_stage,
}


def run_stage(stage: str, config: ExperimentConfig, out: Path, jobs: int = 1) -> dict:
    torch.set_num_threads(max(1, jobs))
    out.mkdir(parents=True, exist_ok=True)
    return RUNNERS[stage](config, out)
