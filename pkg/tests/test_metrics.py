import itertools
from functools import lru_cache

import pytest

from dcaptcha.metrics import (
    ConfusionCounts,
    SchemaError,
    asr,
    cer,
    edit_distance,
    emit_report,
    f1,
    macro_f1,
    markdown_table,
    pivot_table,
    read_csv_records,
    wer,
)


def brute_distance(a, b):
    """Plain recursion over the three edit operations (exponential, tiny inputs only)."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def go(i, j):
        if i == len(a):
            return len(b) - j
        if j == len(b):
            return len(a) - i
        return min(go(i + 1, j) + 1, go(i, j + 1) + 1, go(i + 1, j + 1) + (a[i] != b[j]))

    return go(0, 0)


def test_edit_distance_exhaustive_small():
    alphabet = "ab"
    seqs = [s for n in range(0, 7) for s in itertools.product(alphabet, repeat=n)]
    for a in seqs[::7]:
        for b in seqs[::5]:
            d = edit_distance(a, b)
            assert d == brute_distance(a, b) == edit_distance(b, a)


def test_wer_cer_examples():
    assert wer("a b c", "a b c") == 0.0
    assert wer("a b c", "a x c") == pytest.approx(100 / 3, abs=0.01)
    assert cer("abc", "ab") == pytest.approx(100 / 3, abs=0.01)
    assert cer("a b c", "abc") == 0.0  # whitespace ignored for characters
    assert wer("a", "a b c d") == 300.0  # not clamped
    with pytest.raises(ValueError):
        wer("", "a")


def test_f1_closed_form_enumerated():
    for tp, fp, fn, tn in itertools.product(range(4), repeat=4):
        r = f1(ConfusionCounts(tp, fp, fn, tn))
        if tp + fp == 0 or tp + fn == 0:
            assert r.degenerate and r.f1 == 0.0
            continue
        p, q = tp / (tp + fp), tp / (tp + fn)
        expect = 0.0 if p + q == 0 else 2 * p * q / (p + q)
        assert r.f1 == pytest.approx(expect, abs=1e-12)
        assert r.f1 == pytest.approx(2 * tp / (2 * tp + fp + fn), abs=1e-12)
        assert 0.0 <= r.f1 <= 1.0


def test_f1_examples():
    assert tuple(f1(ConfusionCounts(10, 0, 0, 10))) == (1.0, 1.0, 1.0)
    assert f1(ConfusionCounts(2, 1, 1, 0)).f1 == pytest.approx(2 / 3)
    assert f1(ConfusionCounts(0, 0, 5, 5)).degenerate
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


def test_macro_f1():
    assert macro_f1([0, 1, 2], [0, 1, 2], range(3)) == 1.0
    assert macro_f1([0, 0, 1, 1], [0, 0, 0, 0], range(2)) == pytest.approx((2 / 3 + 0) / 2)


def test_asr():
    assert asr(100, 100) == 100.0
    assert asr(100, 0) == 0.0
    assert asr(6451, 2081) == pytest.approx(32.26, abs=0.01)
    with pytest.raises(ValueError):
        asr(0, 0)


def test_emit_report_round_trip_and_determinism(tmp_path):
    recs = [{"task": "sing", "model": "a,b", "asr": 1.5}, {"task": 'hum "x"', "model": "c", "asr": 2}]
    p1 = emit_report(recs, tmp_path / "a.csv")
    p2 = emit_report(recs, tmp_path / "b.csv")
    assert p1.read_bytes() == p2.read_bytes()
    back = read_csv_records(p1)
    assert back == [{k: str(v) for k, v in r.items()} for r in recs]
    assert emit_report([], tmp_path / "e.csv").read_text() == "\n"
    assert emit_report([], tmp_path / "h.csv", columns=["x", "y"]).read_text() == "x,y\n"
    with pytest.raises(SchemaError):
        emit_report([{"a": 1}, {"b": 2}], tmp_path / "bad.csv")
    j = emit_report(recs, tmp_path / "a.json", "json").read_text()
    assert j.startswith("[")


def test_markdown_shapes():
    md = markdown_table([{"x": 1, "y": 0.5}])
    assert md.splitlines()[0] == "| x | y |"
    pv = pivot_table([{"task": "sing", "model": "A", "asr": 1.0},
                      {"task": "sing", "model": "B", "asr": 2.0},
                      {"task": "hum", "model": "A", "asr": 3.0}], "task", "model", "asr")
    lines = pv.splitlines()
    assert lines[0] == "| task | A | B |" and lines[3] == "| hum | 3.00 |  |"
