import itertools
import json

import numpy as np
import pytest

from mgc import metrics


def oracle(preds, truth):
    """Loop-based reference values computed independently of the vectorized code."""
    n = len(preds)
    exact = sum(1 for p, t in zip(preds, truth) if tuple(p) == tuple(t))
    wrong = sum(1 for p, t in zip(preds, truth) for a, b in zip(p, t) if a != b)
    prf = []
    for k in range(3):
        tp = fp = fn = 0
        for p, t in zip(preds, truth):
            tp += p[k] == 1 and t[k] == 1
            fp += p[k] == 1 and t[k] == 0
            fn += p[k] == 0 and t[k] == 1
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        prf.append((prec, rec, 2 * prec * rec / (prec + rec) if prec + rec else 0.0))
    cm = [[0] * 8 for _ in range(8)]
    for p, t in zip(preds, truth):
        cm[t[0] * 4 + t[1] * 2 + t[2]][p[0] * 4 + p[1] * 2 + p[2]] += 1
    return exact / n, wrong / (3 * n), (n - exact) / n, prf, sum(f for _, _, f in prf) / 3, cm


def test_joint_encoding():
    assert metrics.label_to_joint((0, 0, 0)) == 0
    assert metrics.label_to_joint((1, 0, 1)) == 5
    for y in itertools.product((0, 1), repeat=3):
        assert metrics.joint_to_label(metrics.label_to_joint(y)) == y
    assert sorted(metrics.label_to_joint(y) for y in itertools.product((0, 1), repeat=3)) == list(range(8))
    with pytest.raises(ValueError):
        metrics.joint_to_label(8)
    with pytest.raises(ValueError):
        metrics.label_to_joint((2, 0, 0))


def test_joint_accuracy_examples():
    t = [(1, 0, 1), (0, 0, 0), (1, 1, 1), (0, 1, 0)]
    p = [(1, 0, 1), (1, 0, 0), (1, 1, 0), (0, 0, 0)]
    assert metrics.joint_accuracy(t, t) == 1.0
    assert metrics.joint_accuracy(p, t) == 0.25
    with pytest.raises(ValueError):
        metrics.joint_accuracy(p[:3], t)
    with pytest.raises(ValueError):
        metrics.joint_accuracy([], [])


def test_hamming_examples():
    assert metrics.hamming_loss([(1, 1, 0)], [(1, 1, 0)], "multilabel") == 0
    assert metrics.hamming_loss([(1, 1, 0)], [(1, 1, 0)], "multiclass") == 0
    assert metrics.hamming_loss([(1, 0, 0)], [(1, 1, 0)], "multilabel") == pytest.approx(1 / 3)
    assert metrics.hamming_loss([(1, 0, 0)], [(1, 1, 0)], "multiclass") == 1.0
    with pytest.raises(ValueError):
        metrics.hamming_loss([(1, 0, 0)], [(1, 1, 0)], "")


def test_prf_conventions():
    ones = [(1, 1, 1)] * 5
    prf, macro = metrics.per_class_prf(ones, ones)
    assert prf == [(1.0, 1.0, 1.0)] * 3 and macro == 1.0
    prf, macro = metrics.per_class_prf([(1, 0, 0)] * 4, [(1, 0, 0)] * 4)
    assert prf[1] == (0.0, 0.0, 0.0) and prf[2] == (0.0, 0.0, 0.0)
    assert macro == pytest.approx(1 / 3)


def test_random_batches_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        truth = rng.integers(0, 2, size=(n, 3))
        preds = np.where(rng.random((n, 3)) < rng.uniform(0, 0.6), 1 - truth, truth)
        acc, ham_ml, ham_mc, prf, macro, cm = oracle(preds.tolist(), truth.tolist())
        assert metrics.joint_accuracy(preds, truth) == acc
        assert metrics.hamming_loss(preds, truth, "multilabel") == ham_ml
        assert metrics.hamming_loss(preds, truth, "multiclass") == ham_mc
        got_prf, got_macro = metrics.per_class_prf(preds, truth)
        assert got_prf == prf and got_macro == macro
        assert metrics.confusion_matrix_8(preds, truth).tolist() == cm
        acc, ham = metrics.joint_accuracy(preds, truth), metrics.hamming_loss(preds, truth, "multiclass")
        # identity is exact on the underlying counts; the two float quotients may differ by one ulp
        assert round(acc * n) + round(ham * n) == n
        assert abs(acc - (1 - ham)) <= 2.0 ** -52
        assert metrics.hamming_loss(preds, truth, "multilabel") <= metrics.hamming_loss(preds, truth, "multiclass")


def test_properties():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        truth = rng.integers(0, 2, size=(n, 3))
        preds = rng.integers(0, 2, size=(n, 3))
        acc = metrics.joint_accuracy(preds, truth)
        assert acc <= (preds == truth).mean(axis=0).min()
        cm = metrics.confusion_matrix_8(preds, truth)
        assert cm.sum() == n
        assert np.array_equal(cm.sum(axis=1), np.bincount(metrics.joints(truth), minlength=8))
        assert np.allclose(metrics.confusion_matrix_8(preds, truth, normalize=True), cm / n)
        assert (np.count_nonzero(cm - np.diag(np.diag(cm))) == 0) == (acc == 1.0)
        perm = rng.permutation(n)
        assert metrics.evaluate(preds[perm], truth[perm]) == metrics.evaluate(preds, truth)


def test_iou():
    m = np.zeros((4, 4), np.uint8)
    m[1:3, 1:3] = 1
    assert metrics.iou(m, m) == 1.0
    other = np.zeros_like(m)
    other[0, 0] = 1
    assert metrics.iou(m, other) == 0.0
    assert metrics.iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    assert metrics.pooled_iou([m, other], [m, np.zeros_like(m)]) == pytest.approx(4 / 5)


def test_report_json_roundtrip(tmp_path):
    rep = metrics.evaluate([(1, 0, 0), (0, 1, 1)], [(1, 0, 0), (0, 1, 0)])
    assert metrics.MetricsReport.from_json(rep.to_json()) == rep
    data = json.loads(rep.to_json())
    del data["macro_f1"]
    with pytest.raises(ValueError, match="report.json"):
        metrics.MetricsReport.from_json(json.dumps(data), source="report.json")
    data["schema_version"] = 99
    with pytest.raises(ValueError, match="schema"):
        metrics.MetricsReport.from_json(json.dumps(data))
