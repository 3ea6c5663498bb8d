import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedharness.metrics import MetricsError, compute


def recount(y_true, y_pred, num_classes):
    """Per-sample oracle: tally TP/FP/FN by walking every prediction."""
    tp = [0] * num_classes
    fp = [0] * num_classes
    fn = [0] * num_classes
    for t, p in zip(y_true, y_pred):
        if t == p:
            tp[t] += 1
        else:
            fp[p] += 1
            fn[t] += 1
    f1, support = [], []
    for c in range(num_classes):
        prec = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        rec = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        f1.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        support.append(tp[c] + fn[c])
    micro_p = sum(tp) / (sum(tp) + sum(fp))
    micro_r = sum(tp) / (sum(tp) + sum(fn))
    micro = 2 * micro_p * micro_r / (micro_p + micro_r) if micro_p + micro_r else 0.0
    macro = sum(f1) / num_classes
    weighted = sum(f * s for f, s in zip(f1, support)) / sum(support)
    acc = sum(1 for t, p in zip(y_true, y_pred) if t == p) / len(y_true)
    return micro, macro, weighted, acc, f1


def samples_from(cm):
    y_true, y_pred = [], []
    for t in range(cm.shape[0]):
        for p in range(cm.shape[1]):
            y_true += [t] * int(cm[t, p])
            y_pred += [p] * int(cm[t, p])
    return y_true, y_pred


def test_perfect_classifier():
    r = compute(np.diag([5, 5]))
    assert r.precision == r.recall == r.f1 == [1.0, 1.0]
    assert r.accuracy == r.micro_f1 == r.macro_f1 == r.weighted_f1 == 1.0


def test_symmetric_binary():
    r = compute([[1, 1], [1, 1]])
    assert r.precision == r.recall == r.f1 == [0.5, 0.5]
    assert r.accuracy == 0.5


def test_three_class_random_matches_recount():
    rng = np.random.Generator(np.random.PCG64(11))
    cm = rng.integers(0, 20, size=(3, 3))
    micro, macro, weighted, acc, f1 = recount(*samples_from(cm), 3)
    r = compute(cm)
    assert abs(r.micro_f1 - micro) <= 1e-12
    assert abs(r.macro_f1 - macro) <= 1e-12
    assert abs(r.weighted_f1 - weighted) <= 1e-12
    np.testing.assert_allclose(r.f1, f1, atol=1e-12, rtol=0)
    assert r.micro_f1 == r.accuracy == acc


def test_missing_class_counts_as_zero():
    r = compute([[3, 0, 0], [1, 0, 0], [0, 0, 0]])
    assert r.precision[1] == r.recall[1] == r.f1[1] == 0.0
    assert r.f1[2] == 0.0 and r.support[2] == 0


def test_errors():
    with pytest.raises(MetricsError):
        compute(np.zeros((2, 3)))
    with pytest.raises(MetricsError):
        compute(np.zeros((3, 3)))


confusions = st.integers(2, 6).flatmap(
    lambda c: arrays(np.int64, (c, c), elements=st.integers(0, 30))
).filter(lambda m: m.sum() > 0)


@given(confusions)
def test_properties(cm):
    r = compute(cm)
    values = r.precision + r.recall + r.f1 + [r.accuracy, r.micro_f1, r.macro_f1, r.weighted_f1]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert r.micro_f1 == r.accuracy
    perm = np.random.default_rng(int(cm.sum())).permutation(cm.shape[0])
    p = compute(cm[np.ix_(perm, perm)])
    np.testing.assert_allclose(p.f1, np.asarray(r.f1)[perm], atol=1e-15)
    assert abs(p.macro_f1 - r.macro_f1) <= 1e-12
    assert abs(p.weighted_f1 - r.weighted_f1) <= 1e-12
    assert p.accuracy == r.accuracy


@given(st.integers(2, 5), st.integers(1, 10), st.randoms(use_true_random=False))
def test_equal_support_weighted_equals_macro(c, support, random):
    cm = np.zeros((c, c), dtype=np.int64)
    for t in range(c):
        for _ in range(support):
            cm[t, random.randrange(c)] += 1
    r = compute(cm)
    assert r.weighted_f1 == pytest.approx(r.macro_f1, abs=1e-15)
