import csv
import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from odxu import metrics
from odxu.metrics import EvalFrame, MetricUndefined


def F(t, p, cert=None):
    return EvalFrame(np.array(t), np.array(p), 0, None if cert is None else np.array(cert))


def test_multiclass_accuracy():
    assert metrics.multiclass_accuracy(F([1, 2], [1, 2])) == 1.0
    assert metrics.multiclass_accuracy(F([1, 2], [2, 1])) == 0.0
    assert metrics.multiclass_accuracy(F([0, 1, 2, 1], [0, 1, 2, 2])) == 0.75


def test_binary_accuracy_collapse():
    assert metrics.binary_accuracy(F([1], [2])) == 1.0
    assert metrics.binary_accuracy(F([0, 0], [0, 0])) == 1.0
    # five samples, one cross-attack error: collapse hides it
    assert metrics.binary_accuracy(F([0, 1, 2, 1, 0], [0, 2, 2, 1, 0])) == 1.0
    # five samples, one attack called benign: collapse keeps it
    assert metrics.binary_accuracy(F([0, 1, 2, 1, 0], [0, 0, 2, 1, 0])) == 0.8


def test_misclassified_positive_rate():
    assert metrics.misclassified_positive_rate(F([1, 2, 0], [1, 2, 0])) == 0.0
    t = [1] * 10
    p = [2, 2] + [1] * 8
    assert metrics.misclassified_positive_rate(F(t, p)) == 0.2
    # attack predicted benign lands in FOR, not here
    f = F([1, 0], [0, 0])
    assert metrics.misclassified_positive_rate(f) == 0.0 and metrics.false_omission_rate(f) == 0.5
    with pytest.raises(MetricUndefined):
        metrics.misclassified_positive_rate(F([0], [1]))


def test_false_omission_rate():
    assert metrics.false_omission_rate(F([0, 1], [0, 1])) == 0.0
    assert metrics.false_omission_rate(F([0, 0, 0, 1, 1], [0, 0, 0, 0, 1])) == 0.25
    assert metrics.false_omission_rate(F([0, 1, 0, 2], [0, 0, 0, 0])) == 0.5
    with pytest.raises(MetricUndefined):
        metrics.false_omission_rate(F([1], [1]))


def test_f1():
    assert metrics.f1_binary(F([0, 1, 1], [0, 1, 2])) == 1.0
    assert metrics.f1_binary(F([1, 0], [1, 1])) == pytest.approx(2 / 3, abs=1e-15)
    assert metrics.f1_binary(F([0, 0], [0, 0])) == 0.0


def test_competence():
    f = F([1, 1, 0, 0], [1, 2, 1, 0], [0.9, 0.8, 0.6, 0.99])
    assert metrics.competence(f) == pytest.approx((1.7 - 0.6) / 3, abs=1e-15)
    assert round(metrics.competence(f), 4) == 0.3667
    assert metrics.competence(F([1, 2], [1, 2], [1.0, 1.0])) == 1.0
    assert metrics.competence(F([1, 0], [1, 1], [0.4, 0.4])) == 0.0
    with pytest.raises(MetricUndefined):
        metrics.competence(F([1], [0], [0.5]))


def test_report_marks_undefined():
    rep = metrics.classification_report(F([0, 0], [0, 0], [1.0, 1.0]))
    assert rep["misclassified_positive_rate"] is None and rep["competence"] is None
    assert rep["multiclass_accuracy"] == 1.0


frames = st.integers(1, 60).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 3), min_size=n, max_size=n),
    st.lists(st.integers(0, 3), min_size=n, max_size=n),
    st.lists(st.floats(0, 1), min_size=n, max_size=n),
))


@given(frames)
@settings(max_examples=200, deadline=None)
def test_frame_invariants(tpc):
    f = F(*tpc)
    assert metrics.binary_accuracy(f) >= metrics.multiclass_accuracy(f)
    c = metrics.error_counts(f)
    assert c["multiclass_errors"] == c["binary_errors"] + c["wrong_type_errors"]
    try:
        assert -1.0 <= metrics.competence(f) <= 1.0
    except MetricUndefined:
        pass


# ranking metrics

def pairwise_auroc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    wins = sum((p > n) * 2 + (p == n) for p in pos for n in neg)
    return wins / (2 * len(pos) * len(neg))


def test_auroc_examples():
    assert metrics.auroc([0.9, 0.8, 0.3, 0.2], [1, 1, 0, 0]) == 1.0
    assert metrics.auroc([0.6, 0.3, 0.5, 0.2], [1, 1, 0, 0]) == 0.75
    assert metrics.auroc([0.4] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    with pytest.raises(ValueError):
        metrics.auroc([0.1, 0.2], [1, 1])


scored = st.integers(2, 200).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from([0.0, 0.1, 0.25, 0.5, 0.75, 1.0]) | st.floats(0, 1), min_size=n, max_size=n),
    st.lists(st.booleans(), min_size=n, max_size=n).filter(lambda l: 0 < sum(l) < len(l)),
))


@given(scored)
@settings(max_examples=100, deadline=None)
def test_auroc_equals_pairwise_oracle(sl):
    s, l = sl
    assert metrics.auroc(s, l) == pairwise_auroc(s, l)


@given(scored)
@settings(max_examples=100, deadline=None)
def test_auroc_label_flip(sl):
    s, l = sl
    if len(set(s)) < len(s):
        return
    flipped = [not v for v in l]
    assert metrics.auroc(s, l) + metrics.auroc(s, flipped) == pytest.approx(1.0, abs=1e-15)


def test_tp_at_tn_examples():
    assert metrics.tp_at_tn([0.9, 0.8, *np.linspace(0, 0.5, 30)], [1, 1] + [0] * 30) == 1.0
    neg = np.arange(100) / 100
    assert metrics.tp_at_tn(np.r_[neg, [0.99] * 10], [0] * 100 + [1] * 10) == 1.0


def test_tp_at_tn_identical_distributions():
    rng = np.random.default_rng(0)
    for n in (100, 1000, 4000):
        s = rng.random(n)
        got = metrics.tp_at_tn(np.r_[s, s], [0] * n + [1] * n)
        assert abs(got - 0.05) <= 0.02


def test_tp_at_tn_boundary_convention():
    # 20 negatives 0..19: tau must leave 19 strictly below, so tau = 19
    neg = np.arange(20.0)
    assert metrics.tp_at_tn(np.r_[neg, [19.0, 18.0]], [0] * 20 + [1, 1]) == 0.5
    # an observed positive score between 18 and 19 also qualifies as tau
    assert metrics.tp_at_tn(np.r_[neg, [19.0, 18.5]], [0] * 20 + [1, 1]) == 1.0
    # above every negative nothing is left to clear
    assert metrics.tp_at_tn(np.r_[neg, [5.0]], [0] * 20 + [1]) == 0.0


def test_few_negatives_warn():
    with pytest.warns(metrics.FewNegativesWarning):
        metrics.tp_at_tn([0.1, 0.9], [0, 1])
    rep = metrics.uq_report([0.1, 0.9], [0, 1])
    assert rep["tp_at_tn_warning"]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        metrics.tp_at_tn(np.arange(40.0), [0] * 20 + [1] * 20)


@given(scored)
@settings(max_examples=50, deadline=None)
def test_roc_monotone(sl):
    pts = metrics.roc_curve(*sl)
    fpr = [p[1] for p in pts]
    tpr = [p[2] for p in pts]
    assert fpr == sorted(fpr) and tpr == sorted(tpr)
    assert pts[-1][1:] == (1.0, 1.0)


def test_report_files(tmp_path):
    rep = metrics.uq_report(np.arange(40.0), [0] * 20 + [1] * 20)
    back = json.loads(metrics.write_json(rep, tmp_path / "r.json").read_text())
    assert back == rep
    path = metrics.write_roc_csv(metrics.roc_curve([0.2, 0.8], [0, 1]), tmp_path / "roc.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["threshold", "fpr", "tpr"] and len(rows) == 4
