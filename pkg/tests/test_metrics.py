import csv
import io
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vulberta.errors import InputError
from vulberta.metrics import (ConfusionMatrix, binary_metrics, build_report, confusion, per_class_stats,
                              pr_auc, report_to_csv_row, report_to_json, roc_auc, weighted_f1)


def brute_roc(labels, scores):
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return 100.0 * wins / (len(pos) * len(neg))


def brute_ap(labels, scores):
    n_pos = sum(labels)
    ap, prev_r = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for y, s in zip(labels, scores) if s >= t and y == 1)
        fp = sum(1 for y, s in zip(labels, scores) if s >= t and y == 0)
        r = tp / n_pos
        ap += (r - prev_r) * (tp / (tp + fp))
        prev_r = r
    return 100.0 * ap


def stream_with(tn, fp, fn, tp):
    labels = [0] * (tn + fp) + [1] * (fn + tp)
    preds = [0] * tn + [1] * fp + [0] * fn + [1] * tp
    return labels, preds


# --- published rows --------------------------------------------------------------

def test_draper_cnn_row():
    m = binary_metrics(ConfusionMatrix.from_binary(tn=112491, fp=6675, fn=2168, tp=6085))
    assert m.mcc == pytest.approx(55.86, abs=0.01)
    assert m.f1 == pytest.approx(57.92, abs=0.01)


def test_reveal_row():
    m = binary_metrics(ConfusionMatrix.from_binary(tn=1775, fp=269, fn=84, tp=146))
    assert m.precision == pytest.approx(35.18, abs=0.01)
    assert m.recall == pytest.approx(63.48, abs=0.01)
    assert m.f1 == pytest.approx(45.27, abs=0.01)
    assert m.accuracy == pytest.approx(84.48, abs=0.01)


def test_reveal_stream_gives_that_matrix():
    labels, preds = stream_with(1775, 269, 84, 146)
    cm = confusion(labels, preds, 2)
    assert (cm.tn, cm.fp, cm.fn, cm.tp) == (1775, 269, 84, 146)


def test_vuldeepecker_mlp_row_is_inconsistent():
    # the printed F1 for this row is 93.03; its own matrix gives 92.74
    m = binary_metrics(ConfusionMatrix.from_binary(tn=0, fp=39, fn=99, tp=881))
    assert m.f1 == pytest.approx(92.74, abs=0.01)
    assert abs(m.f1 - 93.03) > 0.2


# --- binary metrics ----------------------------------------------------------------

def test_formulas_by_hand():
    m = binary_metrics(ConfusionMatrix.from_binary(tn=5, fp=1, fn=2, tp=3))
    p, r = 3 / 4, 3 / 5
    assert m.precision == pytest.approx(100 * p)
    assert m.recall == pytest.approx(100 * r)
    assert m.f1 == pytest.approx(100 * 2 * p * r / (p + r))
    assert m.accuracy == pytest.approx(100 * 8 / 11)
    assert m.mcc == pytest.approx(100 * (15 - 2) / math.sqrt(4 * 5 * 6 * 7))
    assert m.degenerate == ()


def test_all_true_positive_is_degenerate_mcc():
    m = binary_metrics(ConfusionMatrix.from_binary(0, 0, 0, 10))
    assert (m.precision, m.recall, m.f1) == (100.0, 100.0, 100.0)
    assert m.mcc == 0.0 and "mcc" in m.degenerate


def test_confusion_errors():
    with pytest.raises(InputError):
        confusion([0, 1], [0], 2)
    with pytest.raises(InputError):
        confusion([], [], 2)
    with pytest.raises(InputError):
        confusion([0, 2], [0, 1], 2)


def test_identity_predictions_are_diagonal():
    y = [0, 1, 2, 2, 1, 0, 0]
    assert np.array_equal(confusion(y, y, 3).matrix, np.diag([3, 2, 2]))


matrices = st.tuples(*[st.integers(0, 500)] * 4).filter(lambda t: min(t[0] + t[1], t[2] + t[3],
                                                                      t[0] + t[2], t[1] + t[3]) > 0)


@settings(max_examples=200, deadline=None)
@given(matrices)
def test_mcc_symmetric_under_class_swap(t):
    tn, fp, fn, tp = t
    a = binary_metrics(ConfusionMatrix.from_binary(tn, fp, fn, tp))
    b = binary_metrics(ConfusionMatrix.from_binary(tp, fn, fp, tn))
    assert a.mcc == pytest.approx(b.mcc, abs=1e-9)


def test_f1_not_symmetric_under_class_swap():
    a = binary_metrics(ConfusionMatrix.from_binary(50, 10, 5, 20))
    b = binary_metrics(ConfusionMatrix.from_binary(20, 5, 10, 50))
    assert abs(a.f1 - b.f1) > 1


@settings(max_examples=100, deadline=None)
@given(matrices)
def test_rates_in_range(t):
    m = binary_metrics(ConfusionMatrix.from_binary(*t))
    for v in m[:4]:
        assert 0 <= v <= 100
    assert -100 <= m.mcc <= 100


# --- weighted F1 ---------------------------------------------------------------------

def test_perfect_41_class():
    y = list(range(41)) * 3
    assert weighted_f1(confusion(y, y, 41)) == pytest.approx(100.0)


def test_two_class_weighted_f1_brute_force():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 100)
    p = rng.integers(0, 2, 100)
    total = 0.0
    for c in (0, 1):
        tp = np.sum((y == c) & (p == c))
        prec = tp / np.sum(p == c)
        rec = tp / np.sum(y == c)
        total += np.sum(y == c) * 2 * prec * rec / (prec + rec)
    assert weighted_f1(confusion(y, p, 2)) == pytest.approx(100 * total / 100, abs=1e-9)


def test_zero_support_class_has_zero_weight():
    cm = confusion([0, 0, 1], [0, 0, 1], 3)
    assert weighted_f1(cm) == pytest.approx(100.0)
    assert per_class_stats(cm)[2].support == 0


def test_single_class_stream_flagged():
    r = build_report([1, 1, 1], [1, 1, 1], 2, scores=[0.9, 0.8, 0.7])
    assert "mcc" in r.degenerate and "roc_auc" in r.degenerate and r.roc_auc is None


# --- AUC -------------------------------------------------------------------------------

def test_separated_scores():
    assert roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 100.0
    assert pr_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 100.0


def test_all_equal_scores_give_half():
    assert roc_auc([0, 1, 0, 1, 1], [0.5] * 5) == 50.0


def test_auc_needs_both_classes():
    with pytest.raises(InputError):
        roc_auc([1, 1], [0.2, 0.3])
    with pytest.raises(InputError):
        pr_auc([0, 0], [0.2, 0.3])


def test_auc_matches_brute_force_on_random_streams():
    rng = np.random.default_rng(2024)
    done = 0
    while done < 200:
        y = rng.integers(0, 2, 50)
        if y.min() == y.max():
            continue
        # coarse scores force plenty of ties
        s = np.round(rng.random(50), int(rng.integers(1, 4)))
        assert abs(roc_auc(y, s) - brute_roc(list(y), list(s))) < 1e-9
        assert abs(pr_auc(y, s) - brute_ap(list(y), list(s))) < 1e-9
        done += 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(-1000, 1000)), min_size=2, max_size=40)
       .filter(lambda v: 0 < sum(y for y, _ in v) < len(v)))
def test_roc_invariant_under_monotone_transform(pairs):
    # integer scores keep the cubic exactly representable, so order is preserved exactly
    y = [a for a, _ in pairs]
    s = np.array([b for _, b in pairs], dtype=np.float64)
    assert roc_auc(y, s) == pytest.approx(roc_auc(y, s ** 3 + 5 * s - 7), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1), st.floats(0, 1)),
                min_size=2, max_size=40).filter(lambda v: 0 < sum(y for y, _, _ in v) < len(v)),
       st.randoms())
def test_metrics_permutation_invariant(rows, rnd):
    shuffled = list(rows)
    rnd.shuffle(shuffled)
    a = build_report(*zip(*[(y, p) for y, p, _ in rows]), 2, scores=[s for *_, s in rows])
    b = build_report(*zip(*[(y, p) for y, p, _ in shuffled]), 2, scores=[s for *_, s in shuffled])
    assert a.to_dict(decimals=9) == b.to_dict(decimals=9)


# --- reports ----------------------------------------------------------------------------

def test_report_fields_and_rounding():
    labels, preds = stream_with(1775, 269, 84, 146)
    r = build_report(labels, preds, 2).to_dict()
    assert (r["precision"], r["recall"], r["f1"], r["accuracy"]) == (35.18, 63.48, 45.27, 84.48)
    assert r["confusion"]["matrix"] == [[1775, 269], [84, 146]]


def test_multiclass_report():
    y = [0, 1, 2, 2, 1, 0]
    r = build_report(y, y, 3)
    assert r.mcc == pytest.approx(100.0) and r.weighted_f1 == pytest.approx(100.0)
    assert r.roc_auc is None


def test_constant_predictor_mcc_zero():
    r = build_report([0, 1] * 10, [1] * 20, 2)
    assert r.mcc == 0.0


def test_json_and_csv_serialisation():
    r = build_report([0, 1, 1, 0], [0, 1, 0, 0], 2, scores=[0.1, 0.9, 0.4, 0.3])
    text = report_to_json(r)
    assert json.loads(text) == r.to_dict() and text == report_to_json(r)
    rows = list(csv.reader(io.StringIO(report_to_csv_row(r, "toy"))))
    assert rows[0][0] == "name" and rows[1][0] == "toy" and float(rows[1][4]) == r.to_dict()["f1"]
