"""Black-box transfer harness.

The attacker labels its own recordings by querying a deployed detector
(label only, metered by a :class:`QueryBudget`), trains a surrogate on
those labels and crafts adversarial samples against it. This module then
measures how often those samples get past independently trained targets,
alone and chained with a task classifier.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import TASKS
from .features import FeatureSpec
from .metrics import emit_report
from .models import (
    REAL,
    Dataset,
    ModelConfig,
    build_model,
    predict_labels,
    train,
    undersample,
)


class BudgetExhausted(RuntimeError):
    pass


@dataclass
class QueryBudget:
    max_queries: int
    used: int = 0

    def __post_init__(self):
        if self.max_queries < 0 or not 0 <= self.used <= self.max_queries:
            raise ValueError("need 0 <= used <= max_queries")

    @property
    def remaining(self) -> int:
        return self.max_queries - self.used

    def charge(self, n: int = 1):
        if n > self.remaining:
            raise BudgetExhausted(
                f"query budget exhausted: {n} requested, {self.remaining} left"
            )
        self.used += n


def query_label(target, buffer, budget: QueryBudget) -> int:
    """Label only, no scores. Every call costs one query, repeats included."""
    budget.charge(1)
    return int(predict_labels(target, buffer)[0])


def query_labels(target, X, budget: QueryBudget) -> np.ndarray:
    """Batched :func:`query_label`; charges one query per row.

    When the budget runs out part-way the rows that fit are labelled (and
    charged) and the error reports how many were left unlabelled.
    """
    X = np.asarray(X)
    n_ok = min(len(X), budget.remaining)
    labels = predict_labels(target, X[:n_ok]) if n_ok else np.zeros(0, dtype=int)
    budget.used += n_ok
    if n_ok < len(X):
        raise BudgetExhausted(
            f"query budget exhausted after {n_ok} of {len(X)} buffers; "
            f"short by {len(X) - n_ok}"
        )
    return labels


@dataclass(frozen=True)
class SurrogateConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        "compact_conv", FeatureSpec("lfcc"), (12, 24), seed=3))
    epochs: int = 15
    batch_size: int = 32
    learning_rate: float = 1e-2
    loss_kind: str = "binary_focal"
    val_fraction: float = 0.15
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)


@dataclass
class SurrogateResult:
    model: object
    history: object
    query_count: int
    holdout: Dataset  # query-labelled validation rows


def build_surrogate(X, target, budget: QueryBudget,
                    config: SurrogateConfig = SurrogateConfig()) -> SurrogateResult:
    """Query-label ``X``, undersample the majority label and train the surrogate."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("surrogate collection is empty")
    before = budget.used
    y = query_labels(target, X, budget)
    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(X))
    n_val = int(round(config.val_fraction * len(X)))
    val = Dataset(X[order[:n_val]], y[order[:n_val]])
    fit = undersample(Dataset(X[order[n_val:]], y[order[n_val:]]), config.seed)
    model, hist = train(build_model(config.model), fit, config.epochs, config.batch_size,
                        config.learning_rate, config.loss_kind, val=val)
    return SurrogateResult(model, hist, budget.used - before, val)


# ---------------------------------------------------------------------------
# evaluation


class TaskView:
    """Binary "contains task" view of a multi-class task classifier."""

    def __init__(self, model, task: str, tasks=TASKS):
        self.model = model
        self.task = task
        self.index = list(tasks).index(task)

    def contains(self, X) -> np.ndarray:
        return predict_labels(self.model, X) == self.index


def passes_detector(model, X) -> np.ndarray:
    return predict_labels(model, X) == REAL


@dataclass
class TransferReport:
    rows: list  # dicts: task, target, n, asr, asr_high_conf, asr_low_conf
    self_asr: float
    query_count: int
    high_confidence: float
    verdicts: list = field(default_factory=list)

    def asr(self, target: str, task: str = "all") -> float:
        for r in self.rows:
            if r["target"] == target and r["task"] == task:
                return r["asr"]
        raise KeyError((target, task))

    def stratified(self, target: str, task: str = "all"):
        for r in self.rows:
            if r["target"] == target and r["task"] == task:
                return r["asr_high_conf"], r["asr_low_conf"]
        raise KeyError((target, task))

    def to_dict(self) -> dict:
        return {"self_asr": self.self_asr, "query_count": self.query_count,
                "high_confidence": self.high_confidence, "rows": self.rows}

    def write(self, out_dir, stem: str = "transfer"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        emit_report(self.rows, out / f"{stem}.csv", "csv", REPORT_COLUMNS)
        (out / f"{stem}.json").write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        with open(out / f"{stem}_verdicts.jsonl", "w") as fh:
            for v in self.verdicts:
                fh.write(json.dumps(v, sort_keys=True) + "\n")


REPORT_COLUMNS = ("task", "target", "n", "asr", "asr_high_conf", "asr_low_conf")


def _rate(mask) -> float | None:
    return round(100.0 * float(np.mean(mask)), 4) if len(mask) else None


def evaluate_transfer(X_adv, confidence, tasks, detectors: dict,
                      task_classifiers: dict | None = None, self_success=None,
                      high_confidence: float = 0.9, query_count: int = 0) -> TransferReport:
    """ASR of every detector and every detector -> task-classifier chain.

    ``detectors`` maps names to detector models; ``task_classifiers`` maps
    names to multi-class task models. A chain counts a sample as a success
    only when the detector says Real and the classifier finds the sample's
    own task. Rows are produced per task and for ``task = "all"``.
    """
    X_adv = np.asarray(X_adv)
    confidence = np.asarray(confidence, dtype=np.float64)
    tasks = np.asarray(tasks)
    if len(X_adv) == 0:
        raise ValueError("no adversarial samples to evaluate")
    high = confidence >= high_confidence
    passed = {name: passes_detector(m, X_adv) for name, m in detectors.items()}
    for cname, cm in (task_classifiers or {}).items():
        pred = predict_labels(cm, X_adv)
        hit = np.array([TASKS[p] == t for p, t in zip(pred, tasks)])
        for dname in detectors:
            passed[f"{dname}->{cname}"] = passed[dname] & hit
    rows = []
    for target, ok in passed.items():
        for task in ("all",) + tuple(t for t in TASKS if t in set(tasks)):
            sel = np.ones(len(tasks), bool) if task == "all" else tasks == task
            rows.append({"task": task, "target": target, "n": int(sel.sum()),
                         "asr": _rate(ok[sel]), "asr_high_conf": _rate(ok[sel & high]),
                         "asr_low_conf": _rate(ok[sel & ~high])})
    verdicts = [
        {"sample": i, "task": str(tasks[i]), "confidence": float(confidence[i]),
         "stratum": "high" if high[i] else "low",
         **{t: bool(ok[i]) for t, ok in passed.items()}}
        for i in range(len(X_adv))
    ]
    self_asr = _rate(np.asarray(self_success)) if self_success is not None else float("nan")
    return TransferReport(rows, self_asr, query_count, high_confidence, verdicts)


def report_from_verdicts(verdicts, high_confidence: float, self_asr: float = float("nan"),
                         query_count: int = 0) -> TransferReport:
    """Recompute a report from a per-sample verdict log (audit trail)."""
    targets = [k for k in verdicts[0] if k not in ("sample", "task", "confidence", "stratum")]
    tasks = np.array([v["task"] for v in verdicts])
    high = np.array([v["stratum"] == "high" for v in verdicts])
    rows = []
    for target in targets:
        ok = np.array([v[target] for v in verdicts])
        for task in ("all",) + tuple(t for t in TASKS if t in set(tasks)):
            sel = np.ones(len(tasks), bool) if task == "all" else tasks == task
            rows.append({"task": task, "target": target, "n": int(sel.sum()),
                         "asr": _rate(ok[sel]), "asr_high_conf": _rate(ok[sel & high]),
                         "asr_low_conf": _rate(ok[sel & ~high])})
    return TransferReport(rows, self_asr, query_count, high_confidence, list(verdicts))


def read_verdicts(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
