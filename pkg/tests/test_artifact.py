import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flownae import artifact as ae


def _kde(banks, h):
    return ae.KdeModel(tuple(np.asarray(b, float) for b in banks), (h, h))


def test_kde_closed_forms():
    k = _kde([[[0.0, 0.0]], [[1.0, 1.0]]], 0.5)
    peak = (2 * math.pi * 0.25) ** -1
    assert k.density(np.array([[0.0, 0.0]]), 0)[0] == pytest.approx(peak)
    assert k.density(np.array([[50.0, 50.0]]), 0)[0] == pytest.approx(0.0, abs=1e-300)
    two = _kde([[[0.0], [2.0]], [[0.0]]], 1.0)
    mid = math.exp(-0.5) / math.sqrt(2 * math.pi)
    assert two.density(np.array([[1.0]]), 0)[0] == pytest.approx(mid)
    assert two.log_density(np.array([[1.0]]), 0)[0] == pytest.approx(math.log(mid))


def test_kde_validation():
    with pytest.raises(ValueError):
        _kde([np.zeros((0, 2)), [[1.0, 1.0]]], 1.0)
    with pytest.raises(ValueError):
        _kde([[[0.0]], [[1.0]]], 0.0)


def test_density_score_monotone(small_det, small_data):
    d1 = small_data[1]
    k = ae.fit_kde(small_det, d1)
    assert all(len(b) > 0 for b in k.banks)
    x = d1.features[0]
    assert ae.density_score(k, small_det, x) == ae.density_score(k, small_det, x)
    far_score = ae.density_score(k, small_det, np.ones(len(x)) * 5.0)
    assert ae.density_score(k, small_det, x) < far_score


def test_uncertainty_score(small_det, small_data):
    x = small_data[3].features[:10]
    a = ae.uncertainty_score(small_det, x, 0.5, 20, seed=1)
    np.testing.assert_array_equal(a, ae.uncertainty_score(small_det, x, 0.5, 20, seed=1))
    assert (a >= 0).all()


def test_combiner_separable_and_direction():
    clean = np.array([[0.0, 0.0], [0.1, 0.0]])
    adv = np.array([[1.0, 0.0], [1.1, 0.0]])
    c = ae.fit_combiner(clean, adv)
    assert c.weights[0] > 0 and abs(c.weights[1]) < 1e-12
    pred = c.proba(np.vstack([clean, adv])) > 0.5
    np.testing.assert_array_equal(pred, [False, False, True, True])
    with pytest.raises(ValueError):
        ae.fit_combiner(np.zeros((0, 2)), adv)


def test_combiner_null_is_near_chance(rng):
    a, b = rng.normal(size=(400, 2)), rng.normal(size=(400, 2))
    c = ae.fit_combiner(a[:200], b[:200])
    auc = ae.auc_roc(np.r_[c.decision(a[200:]), c.decision(b[200:])], np.r_[np.zeros(200), np.ones(200)]).auc
    assert abs(auc - 0.5) <= 0.05


def test_auc_examples():
    assert ae.auc_roc([0.9, 0.8], [1, 0]).auc == 1.0
    assert ae.auc_roc([0.5, 0.5], [1, 0]).auc == 0.5
    assert ae.auc_roc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]).auc == 0.75
    with pytest.raises(ValueError):
        ae.auc_roc([0.1, 0.2], [1, 1])


def _auc_pairs(s, y):
    pos = [a for a, l in zip(s, y) if l == 1]
    neg = [a for a, l in zip(s, y) if l == 0]
    return sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in product(pos, neg)) / (len(pos) * len(neg))


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.booleans()), min_size=2, max_size=200))
def test_auc_matches_pairwise_and_trapezoid(rows):
    s = np.array([r[0] for r in rows], float)
    y = np.array([r[1] for r in rows], int)
    if y.min() == y.max():
        return
    roc = ae.auc_roc(s, y)
    assert roc.auc == pytest.approx(_auc_pairs(s, y), abs=1e-12)
    assert roc.auc == pytest.approx(np.trapezoid(roc.tpr, roc.fpr), abs=1e-12)
    assert (np.diff(roc.tpr) >= 0).all() and (np.diff(roc.fpr) >= 0).all()
    assert ae.auc_roc(np.exp(s), y).auc == roc.auc


def test_auc_symmetry(rng):
    s = rng.random(50)
    y = rng.integers(0, 2, 50)
    assert ae.auc_roc(s, y).auc + ae.auc_roc(-s, y).auc == pytest.approx(1.0)


def test_clean_vs_clean_detect_auc_is_chance(small_det, small_data):
    d1, test = small_data[1], small_data[3]
    k = ae.fit_kde(small_det, d1)
    x = test.features
    half = len(x) // 2
    a, b = x[:half], x[half:]
    comb = ae.fit_combiner(ae.score_features(small_det, k, a[::2]), ae.score_features(small_det, k, b[::2]))
    auc = ae.detect_auc(small_det, k, comb, a[1::2], b[1::2])
    assert abs(auc - 0.5) <= 0.05
