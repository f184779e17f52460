import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facestutter.metrics import accuracy, auc_roc, f1_score, threshold
from oracles import brute_force_auc


def test_auc_hand_example():
    assert auc_roc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_perfect_separation():
    assert auc_roc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0


def test_auc_all_ties():
    assert auc_roc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        auc_roc([0.1, 0.2], [1, 1])


def test_auc_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        auc_roc([0.1, 0.2, 0.3], [0, 1])


def test_auc_matches_pair_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 15))
        y = rng.integers(0, 2, n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 5, n) / 4.0  # coarse grid forces ties
        assert auc_roc(s, y) == brute_force_auc(s, y)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-40, 40), min_size=4, max_size=30), st.integers(0, 2**31))
def test_auc_invariant_under_monotone_transform(scores, seed):
    # quarter-step grid: exp and the affine map stay strictly monotone in float64
    s = np.array(scores) / 4.0
    y = np.random.default_rng(seed).integers(0, 2, s.size)
    y[0], y[1] = 0, 1
    base = auc_roc(s, y)
    assert auc_roc(np.exp(s), y) == base
    assert auc_roc(3.0 * s - 7.0, y) == base
    assert 0.0 <= base <= 1.0


def test_f1_examples():
    assert f1_score([1, 0, 1], [1, 0, 1]) == 1.0
    # TP=2, FP=1, FN=1
    assert f1_score([1, 1, 1, 0, 0], [1, 1, 0, 1, 0]) == pytest.approx(2 / 3, abs=1e-15)
    assert f1_score([0, 0, 0], [1, 0, 1]) == 0.0
    assert f1_score([0, 0], [0, 0]) == 0.0


def test_threshold_at_half():
    assert threshold([0.49, 0.5, 0.51]).tolist() == [0, 1, 1]


def test_constant_classifier_on_balanced_set():
    y = np.array([0, 1] * 50)
    assert accuracy(np.ones(100, dtype=int), y) == 0.5
    assert accuracy(np.zeros(100, dtype=int), y) == 0.5


def test_non_binary_labels_rejected():
    with pytest.raises(ValueError):
        accuracy([0, 2], [0, 1])
