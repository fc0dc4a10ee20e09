from types import SimpleNamespace

import numpy as np
import pytest
import torch
from torch import nn

from dcaptcha.audio import AudioBuffer
from dcaptcha.corpus import TASKS
from dcaptcha.models import FAKE, REAL
from dcaptcha.transfer import (
    BudgetExhausted,
    QueryBudget,
    SurrogateConfig,
    build_surrogate,
    evaluate_transfer,
    query_label,
    query_labels,
    read_verdicts,
    report_from_verdicts,
)


class Loudness(nn.Module):
    """Says Real when the peak exceeds ``level``; counts its calls."""

    def __init__(self, level=0.5):
        super().__init__()
        self.level = nn.Parameter(torch.tensor(level, dtype=torch.float64), requires_grad=False)
        self.config = SimpleNamespace(class_count=2)
        self.calls = 0

    def forward(self, x):
        self.calls += len(x)
        real = (x.abs().amax(-1) > self.level).to(torch.float64)
        return torch.stack([real, 1 - real], -1) * 10


class FixedTask(nn.Module):
    def __init__(self, task):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(len(TASKS), dtype=torch.float64), requires_grad=False)
        self.w.data[TASKS.index(task)] = 5.0
        self.config = SimpleNamespace(class_count=len(TASKS))

    def forward(self, x):
        return self.w.expand(len(x), -1)


def _batch(peaks):
    t = np.linspace(0, 1, 4000)
    return np.array([p * np.sin(2 * np.pi * 300 * t) for p in peaks])


def test_budget_accounting():
    b = QueryBudget(3)
    target = Loudness()
    assert query_label(target, AudioBuffer(_batch([0.9])[0]), b) == REAL
    assert query_label(target, AudioBuffer(_batch([0.1])[0]), b) == FAKE
    query_label(target, AudioBuffer(_batch([0.1])[0]), b)  # repeats cost too
    assert b.remaining == 0
    with pytest.raises(BudgetExhausted):
        query_label(target, AudioBuffer(_batch([0.1])[0]), b)
    with pytest.raises(ValueError):
        QueryBudget(2, used=3)


def test_query_labels_shortfall():
    b = QueryBudget(5)
    with pytest.raises(BudgetExhausted, match="short by 3"):
        query_labels(Loudness(), _batch([0.9] * 8), b)
    assert b.used == 5 and b.remaining == 0


def test_query_labels_zero_budget_makes_no_calls():
    target = Loudness()
    with pytest.raises(BudgetExhausted):
        query_labels(target, _batch([0.9]), QueryBudget(0))
    assert target.calls == 0


def test_surrogate_query_count():
    rng = np.random.default_rng(0)
    X = _batch(rng.uniform(0.1, 0.9, 40))
    b = QueryBudget(100)
    cfg = SurrogateConfig(epochs=1)
    r = build_surrogate(X, Loudness(), b, cfg)
    assert r.query_count == 40 and b.used == 40
    with pytest.raises(ValueError):
        build_surrogate(X[:0], Loudness(), b, cfg)


def test_evaluate_transfer_rates_and_chains(tmp_path):
    X = _batch([0.9, 0.9, 0.1, 0.9])
    tasks = np.array(["sing", "laugh", "sing", "sing"])
    conf = np.array([0.99, 0.5, 0.99, 0.2])
    rep = evaluate_transfer(X, conf, tasks, {"loud": Loudness()},
                            {"always_sing": FixedTask("sing")}, [1, 1, 1, 0], 0.9, 17)
    assert rep.asr("loud") == 75.0
    assert rep.asr("loud->always_sing") == 50.0
    assert rep.asr("loud->always_sing", "laugh") == 0.0
    assert rep.stratified("loud") == (50.0, 100.0)
    assert rep.self_asr == 75.0 and rep.query_count == 17
    rep.write(tmp_path, "t")
    again = report_from_verdicts(read_verdicts(tmp_path / "t_verdicts.jsonl"), 0.9)
    assert again.rows == rep.rows


def test_evaluate_transfer_rejects_empty():
    with pytest.raises(ValueError):
        evaluate_transfer(np.zeros((0, 10)), [], [], {"loud": Loudness()})
