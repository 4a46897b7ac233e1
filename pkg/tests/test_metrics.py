from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gcnres.errors import UndefinedMetricError, ValidationError
from gcnres.metrics import accuracy, roc_auc, roc_auc_exact, score


def brute_auc(labels, scores):
    """Fraction of positive/negative pairs ordered correctly, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else Fraction(0)
                for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_reference_auc():
    assert roc_auc_exact([1, 0, 1, 0], [0.9, 0.8, 0.3, 0.1]) == Fraction(3, 4)


def test_all_ties_half():
    assert roc_auc_exact([1, 0, 1, 0, 1, 0], [0.4] * 6) == Fraction(1, 2)


def test_perfect_and_reversed():
    assert roc_auc([0, 0, 1, 1], [0.1, 0.2, 0.8, 0.9]) == 1.0
    assert roc_auc([1, 1, 0, 0], [0.1, 0.2, 0.8, 0.9]) == 0.0


def test_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([1, 1, 1], [0.2, 0.3, 0.4])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.booleans(), st.integers(0, 6)), min_size=2, max_size=40))
def test_matches_pair_count(pairs):
    labels = [y for y, _ in pairs]
    scores = [s / 7 for _, s in pairs]
    if all(labels) or not any(labels):
        return
    assert roc_auc_exact(labels, scores) == brute_auc(labels, scores)


def test_multilabel_average():
    labels = np.array([[1, 0], [0, 1], [1, 1], [0, 0]])
    scores = np.array([[0.9, 0.2], [0.1, 0.8], [0.7, 0.1], [0.3, 0.4]])
    cols = [float(brute_auc(labels[:, j], scores[:, j])) for j in range(2)]
    assert roc_auc(labels, scores) == pytest.approx(np.mean(cols), abs=1e-15)


def test_accuracy_one_hot_truth():
    y = np.array([2, 0, 1, 1])
    assert accuracy(np.eye(3)[y], y) == 1.0


def test_accuracy_empty():
    with pytest.raises(ValidationError):
        accuracy(np.zeros((0, 2)), [])


def test_score_binary_rocauc_uses_class_one():
    probs = np.array([[0.1, 0.9], [0.2, 0.8], [0.7, 0.3], [0.9, 0.1]])
    labels = np.array([1, 0, 1, 0])
    assert score(np.log(probs), labels, np.arange(4), "rocauc") == 0.75


def test_score_multiclass_rocauc():
    probs = np.eye(3)[[0, 1, 2, 0, 1, 2]] * 0.7 + 0.1
    labels = np.array([0, 1, 2, 0, 1, 2])
    assert score(np.log(probs), labels, np.arange(6), "rocauc") == 1.0


def test_score_unknown_metric():
    with pytest.raises(ValidationError):
        score(np.zeros((2, 2)), [0, 1], [0, 1], "f1")


def test_score_empty_split():
    with pytest.raises(ValidationError):
        score(np.zeros((2, 2)), [0, 1], [], "accuracy")
