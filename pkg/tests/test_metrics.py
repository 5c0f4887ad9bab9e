import json

import pytest
from hypothesis import given, strategies as st

from oracles import f1_from_counts
from relsplit.errors import IdMismatch, OutOfRange, ParseError
from relsplit.metrics import (
    ConfusionCounts,
    confusion,
    f1_average,
    f1_positive,
    fold_report,
    format_report,
    merge_reports,
    read_report_summary,
    write_report,
)

counts = st.builds(ConfusionCounts, *(st.integers(0, 500) for _ in range(4)))
unit = st.floats(0.0, 1.0, allow_nan=False)


# ---------------------------------------------------------------------------
# confusion

def test_perfect_predictor():
    truths = [(f"p{i}", 1) for i in range(10)] + [(f"n{i}", 0) for i in range(5)]
    assert confusion(truths, truths) == ConfusionCounts(tp=10, fp=0, tn=5, fn=0)


def test_flipped_predictions_swap_counts():
    truths = [(f"r{i}", i % 3 == 0) for i in range(30)]
    truths = [(r, int(y)) for r, y in truths]
    preds = [(f"r{i}", int(i % 2 == 0)) for i in range(30)]
    c = confusion(preds, truths)
    flipped = confusion([(r, 1 - y) for r, y in preds], truths)
    assert (flipped.tp, flipped.fn, flipped.tn, flipped.fp) == (c.fn, c.tp, c.fp, c.tn)
    assert c.total == 30


def test_confusion_id_mismatch():
    with pytest.raises(IdMismatch) as exc:
        confusion([("a", 1)], [("a", 1), ("b", 0)])
    assert "b" in str(exc.value)
    with pytest.raises(ValueError):
        confusion([("a", 2)], [("a", 1)])


# ---------------------------------------------------------------------------
# f1_positive

def test_f1_examples():
    m = f1_positive(ConfusionCounts(tp=2, fp=1, fn=1))
    assert m.precision == pytest.approx(2 / 3) and m.recall == pytest.approx(2 / 3) and m.f1 == pytest.approx(2 / 3)
    m = f1_positive(ConfusionCounts(tn=10))
    assert (m.precision, m.recall, m.f1) == (0.0, 0.0, 0.0)
    assert f1_positive(ConfusionCounts(tp=5)).f1 == 1.0


@given(counts)
def test_f1_matches_exact_oracle(c):
    assert f1_positive(c).f1 == pytest.approx(float(f1_from_counts(c.tp, c.fp, c.fn)), abs=1e-12)
    assert f1_positive(c).support_positive == c.tp + c.fn


@given(counts, st.integers(0, 1000))
def test_f1_ignores_true_negatives(c, k):
    assert f1_positive(c).f1 == f1_positive(ConfusionCounts(c.tp, c.fp, c.tn + k, c.fn)).f1


@given(counts)
def test_f1_monotone_in_tp(c):
    more = ConfusionCounts(c.tp + 1, c.fp, c.tn, c.fn)
    assert f1_from_counts(more.tp, more.fp, more.fn) >= f1_from_counts(c.tp, c.fp, c.fn)
    assert f1_positive(more).f1 >= f1_positive(c).f1 - 1e-15


# ---------------------------------------------------------------------------
# f1_average

def test_f1_average_examples():
    assert f1_average(0.8936, 0.8881) == 0.89085
    assert f1_average(1.0, 0.0) == 0.5
    for bad in ((1.2, 0.5), (0.5, -0.01), (float("nan"), 0.5)):
        with pytest.raises(OutOfRange):
            f1_average(*bad)


@given(unit)
def test_f1_average_identity(x):
    assert f1_average(x, x) == x


@given(unit, unit)
def test_f1_average_symmetric_and_bounded(a, b):
    assert f1_average(a, b) == f1_average(b, a)
    assert min(a, b) <= f1_average(a, b) <= max(a, b)
    assert f1_average(a, b) == pytest.approx(0.5 * a + 0.5 * b, abs=1e-15)


# ---------------------------------------------------------------------------
# reports

def _fold_data():
    truths = {f"r{i}": int(i % 2 == 0) for i in range(12)}
    preds = dict(truths)
    preds["r0"] = 0  # fold 0 loses a true positive
    preds["r1"] = 1  # fold 1 gains a false positive
    folds = {f"r{i}": i % 3 for i in range(12)}
    return preds, truths, folds


def test_fold_report_statistics():
    preds, truths, folds = _fold_data()
    rep = fold_report(preds, truths, folds)
    assert [f for f, _, _ in rep.per_fold] == [0, 1, 2]
    f1s = rep.f1_values
    assert f1s[2] == 1.0 and f1s[0] < 1.0 and f1s[1] < 1.0
    assert rep.mean_f1 == pytest.approx(sum(f1s) / 3)
    mean = sum(f1s) / 3
    assert rep.std_f1 == pytest.approx((sum((x - mean) ** 2 for x in f1s) / 2) ** 0.5)
    assert rep.best_f1 == 1.0
    assert rep.pooled_counts == confusion(preds.items(), truths.items())


def test_report_without_folds_uses_pooled():
    preds, truths, _ = _fold_data()
    rep = fold_report(preds, truths)
    assert rep.per_fold == [] and rep.mean_f1 == rep.pooled.f1 and rep.std_f1 == 0.0


def test_merge_reports_orders_and_pools():
    a, b = ConfusionCounts(tp=3, fn=1), ConfusionCounts(tp=1, fp=1, tn=4)
    rep = merge_reports([(1, b), (0, a)])
    assert [f for f, _, _ in rep.per_fold] == [0, 1]
    assert rep.pooled_counts == a + b


def test_write_and_read_report(tmp_path):
    preds, truths, folds = _fold_data()
    rep = fold_report(preds, truths, folds)
    jpath = write_report(rep, tmp_path / "r.txt", title="qi", extra={"task": "qi", "config": {"k": 3}})
    text = (tmp_path / "r.txt").read_text()
    assert text.startswith("# qi\n") and "task: qi" in text and '{"k": 3}' in text
    assert "mean_f1:" in text and "pooled:" in text
    rows = [json.loads(line) for line in jpath.read_text().splitlines()]
    assert [r["type"] for r in rows] == ["fold"] * 3 + ["summary"]
    for path in (tmp_path / "r.txt", jpath):
        summary = read_report_summary(path)
        assert summary["mean_f1"] == rep.mean_f1 and summary["pooled"]["f1"] == rep.pooled.f1
    assert format_report(rep, "qi", {"task": "qi", "config": {"k": 3}}) == text


def test_read_report_without_summary(tmp_path):
    p = tmp_path / "x.txt"
    p.write_text("not a report\n")
    with pytest.raises(ParseError):
        read_report_summary(p)
