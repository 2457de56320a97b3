import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densetl.metrics import confusion, correct_count, per_class, percent, summarize


def brute_force(preds, labels, k):
    counts = [[0] * k for _ in range(k)]
    for p, t in zip(preds, labels):
        counts[t][p] += 1
    precision, recall, f1 = [], [], []
    for c in range(k):
        tp = counts[c][c]
        col = sum(counts[r][c] for r in range(k))
        row = sum(counts[c])
        pr = tp / col if col else 0.0
        rc = tp / row if row else 0.0
        precision.append(pr)
        recall.append(rc)
        f1.append(2 * pr * rc / (pr + rc) if pr + rc else 0.0)
    correct = sum(1 for p, t in zip(preds, labels) if p == t)
    return counts, correct, sum(precision) / k, sum(recall) / k, sum(f1) / k


@pytest.mark.parametrize("k", [2, 3, 5])
def test_against_brute_force(k):
    rng = np.random.default_rng(k)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        preds, labels = rng.integers(0, k, n), rng.integers(0, k, n)
        counts, correct, p, r, f = brute_force(preds.tolist(), labels.tolist(), k)
        cm = confusion(preds, labels, k)
        m = summarize(cm)
        assert cm.to_list() == counts
        assert correct_count(preds, labels) == correct == m.correct_count
        assert m.accuracy == correct / n
        assert m.precision_macro == pytest.approx(p, abs=1e-12)
        assert m.recall_macro == pytest.approx(r, abs=1e-12)
        assert m.f1_macro == pytest.approx(f, abs=1e-12)


def test_37_of_40():
    labels = np.repeat([0, 1, 2], [14, 13, 13])
    preds = labels.copy()
    preds[[0, 15, 30]] = [1, 2, 0]
    m = summarize(confusion(preds, labels, 3))
    assert m.correct_count == 37
    assert m.accuracy == 0.925
    assert percent(m.accuracy) == "92.5"


def test_absent_class_counts_as_zero():
    m = summarize(confusion([0, 0, 1], [0, 0, 1], 3))
    assert m.accuracy == 1.0
    assert m.precision_macro == pytest.approx(2 / 3)
    scores = per_class(confusion([0], [0], 2))
    assert scores["precision"][1] == 0.0 and scores["f1"][1] == 0.0


def test_input_validation():
    with pytest.raises(ValueError):
        confusion([0, 1], [0], 2)
    with pytest.raises(ValueError):
        confusion([0, 3], [0, 1], 3)
    with pytest.raises(ValueError):
        confusion([0.5], [0], 2)
    with pytest.raises(ValueError):
        summarize(confusion([], [], 2))


def test_percent_rounding():
    assert percent(0.9953) == "99.5"
    assert percent(1.0) == "100.0"


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=50))
def test_trace_equals_correct(pairs):
    preds, labels = zip(*pairs)
    cm = confusion(list(preds), list(labels), 4)
    assert np.trace(cm.counts) == correct_count(list(preds), list(labels))
    assert cm.total == len(pairs)


# -- worked examples ----------------------------------------------------------


def test_confusion_examples():
    labels = np.repeat([0, 1, 2], 10)
    cm = confusion(labels, labels, 3)
    assert cm.to_list() == [[10, 0, 0], [0, 10, 0], [0, 0, 10]]
    m = summarize(cm)
    assert (m.accuracy, m.precision_macro, m.recall_macro, m.f1_macro) == (1.0, 1.0, 1.0, 1.0)
    zeros = confusion(np.zeros(30, int), labels, 3).counts
    assert zeros[:, 0].tolist() == [10, 10, 10] and not zeros[:, 1:].any()


def test_asymmetric_hand_case():
    # rows true, cols predicted
    cm = confusion([0, 0, 1, 1, 1, 2, 0, 2, 2, 2], [0, 0, 0, 1, 1, 1, 2, 2, 2, 2], 3)
    assert cm.to_list() == [[2, 1, 0], [0, 2, 1], [1, 0, 3]]
    s = per_class(cm)
    np.testing.assert_allclose(s["precision"], [2 / 3, 2 / 3, 3 / 4])
    np.testing.assert_allclose(s["recall"], [2 / 3, 2 / 3, 3 / 4])
    np.testing.assert_allclose(summarize(cm).f1_macro, (2 / 3 + 2 / 3 + 3 / 4) / 3)


def test_correct_count_examples():
    v = np.arange(40) % 3
    assert correct_count(v, v) == 40
    assert correct_count(v, (v + 1) % 3) == 0
