"""F1, attack success rate, WER/CER and report emission."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_labels(cls, y_true, y_pred, positive: int = 1) -> "ConfusionCounts":
        t = np.asarray(y_true) == positive
        p = np.asarray(y_pred) == positive
        return cls(int(np.sum(t & p)), int(np.sum(~t & p)),
                   int(np.sum(t & ~p)), int(np.sum(~t & ~p)))


@dataclass(frozen=True)
class F1Result:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def f1(counts: ConfusionCounts) -> F1Result:
    """Precision, recall and their harmonic mean.

    Without predicted or actual positives the score is reported as 0 with
    ``degenerate`` set, rather than raising.
    """
    if counts.tp + counts.fp == 0 or counts.tp + counts.fn == 0:
        return F1Result(0.0, 0.0, 0.0, True)
    p = counts.tp / (counts.tp + counts.fp)
    r = counts.tp / (counts.tp + counts.fn)
    score = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return F1Result(p, r, score)


def macro_f1(y_true, y_pred, classes) -> float:
    """Unweighted mean of the one-vs-rest F1 of each class."""
    return float(np.mean([f1(ConfusionCounts.from_labels(y_true, y_pred, c)).f1
                          for c in classes]))


def score_labels(y_true, y_pred, class_count: int = 2) -> float:
    """Fake-class F1 for detectors, macro F1 for multi-class models."""
    if class_count == 2:
        return f1(ConfusionCounts.from_labels(y_true, y_pred)).f1
    return macro_f1(y_true, y_pred, range(class_count))


def asr(attempted: int, succeeded: int) -> float:
    if attempted <= 0:
        raise ValueError("attack success rate needs at least one attempt")
    if not 0 <= succeeded <= attempted:
        raise ValueError("succeeded must lie in [0, attempted]")
    return 100.0 * succeeded / attempted


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def error_rate(reference, hypothesis) -> float:
    reference = list(reference)
    if not reference:
        raise ValueError("reference must be non-empty")
    return 100.0 * edit_distance(reference, hypothesis) / len(reference)


def wer(reference: str, hypothesis: str) -> float:
    return error_rate(reference.split(), hypothesis.split())


def cer(reference: str, hypothesis: str) -> float:
    strip = lambda s: [c for c in s if not c.isspace()]
    return error_rate(strip(reference), strip(hypothesis))


def wer_cer(reference: str, hypothesis: str) -> tuple[float, float]:
    return wer(reference, hypothesis), cer(reference, hypothesis)


# ---------------------------------------------------------------------------
# reports


class SchemaError(ValueError):
    pass


def _columns(records, columns=None):
    if columns is not None:
        cols = list(columns)
    elif records:
        cols = list(records[0])
    else:
        cols = []
    for r in records:
        if set(r) != set(cols):
            raise SchemaError(f"record keys {sorted(r)} differ from {sorted(cols)}")
    return cols


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def markdown_table(records, columns=None) -> str:
    cols = _columns(records, columns)
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    for r in records:
        lines.append("| " + " | ".join(_fmt(r[c]) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def pivot_table(records, row: str, column: str, value: str) -> str:
    """Markdown table with ``row`` values as rows and ``column`` values as columns."""
    rows = list(dict.fromkeys(r[row] for r in records))
    cols = list(dict.fromkeys(r[column] for r in records))
    cell = {(r[row], r[column]): r[value] for r in records}
    out = [{row: rv, **{c: cell.get((rv, c), "") for c in cols}} for rv in rows]
    return markdown_table(out, [row] + cols)


def emit_report(records, path, fmt: str = "csv", columns=None) -> Path:
    """Write ``records`` (list of dicts sharing one schema) deterministically."""
    records = list(records)
    cols = _columns(records, columns)
    path = Path(path)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({c: r[c] for c in cols})
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps([{c: r[c] for c in cols} for r in records], indent=2) + "\n"
    elif fmt in ("markdown", "markdown-table"):
        text = markdown_table(records, cols)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    path.write_text(text)
    return path


def read_csv_records(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
