from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pacia.metrics import MetricUndefinedError, auprc, delta_auprc, roc_auc


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_ap(scores, labels):
    # stable descending order: higher score first, earlier index first on ties;
    # precision terms summed exactly, then rounded once
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, Fraction(0)
    for rank, i in enumerate(order, start=1):
        if labels[i] == 1:
            hits += 1
            total += Fraction(hits / rank)
    return float(total) / sum(labels)


def test_roc_examples():
    assert roc_auc([0.9, 0.8, 0.3], [1, 1, 0]) == 1.0
    assert roc_auc([0.5, 0.5], [1, 0]) == 0.5
    assert roc_auc([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == 0.75


def test_auprc_examples():
    assert auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert auprc([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == 0.25
    assert auprc([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == pytest.approx(5 / 6, abs=1e-15)


def test_delta_auprc_examples():
    assert delta_auprc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 0.5
    assert delta_auprc([0.9, 0.6, 0.4, 0.2], [1, 0, 1, 0]) == pytest.approx(1 / 3, abs=1e-15)
    # AP equal to prevalence: one positive in the middle of two
    assert delta_auprc([0.9, 0.5], [0, 1]) == 0.0


def test_undefined_cases():
    with pytest.raises(MetricUndefinedError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(MetricUndefinedError):
        auprc([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        roc_auc([0.1], [1, 0])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [2, 0])


def test_brute_force_agreement_1000_instances():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[rng.integers(n)] = 1
        labels[(rng.integers(n - 1) + np.flatnonzero(labels == 1)[0] + 1) % n] = 0
        scores = np.round(rng.random(n), 1)  # coarse grid forces ties
        assert roc_auc(scores, labels) == brute_auc(list(scores), list(labels))
        assert auprc(scores, labels) == brute_ap(list(scores), list(labels))


def _case(n):
    # distinct grid scores stay distinct under exp and affine maps
    grid = st.lists(st.integers(-400, 400), min_size=n, max_size=n, unique=True).map(lambda v: [x / 80 for x in v])
    labels = st.lists(st.integers(0, 1), min_size=n - 2, max_size=n - 2).map(lambda y: [1, 0] + y)
    return st.tuples(grid, labels)


labelled = st.integers(2, 40).flatmap(_case)


@settings(max_examples=200, deadline=None)
@given(labelled)
def test_roc_monotone_invariance(case):
    scores, labels = case
    s = np.array(scores)
    assert roc_auc(np.exp(s), labels) == roc_auc(s, labels)
    assert roc_auc(3 * s - 1, labels) == roc_auc(s, labels)


@settings(max_examples=200, deadline=None)
@given(labelled)
def test_roc_label_flip_complement(case):
    scores, labels = case
    flipped = [1 - y for y in labels]
    assert roc_auc(scores, labels) + roc_auc(scores, flipped) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(labelled)
def test_auprc_tie_free_brute_force(case):
    scores, labels = case
    assert auprc(scores, labels) == brute_ap(scores, labels)
    assert 0 < auprc(scores, labels) <= 1
