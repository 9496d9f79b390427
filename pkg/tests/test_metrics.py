import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from flownae import metrics
from flownae.detector import accuracy


def test_asr_examples():
    assert metrics.asr(0.8912, 0.4684) == pytest.approx(0.4745, abs=5e-4)
    assert metrics.asr(0.9530, 0.7014) == pytest.approx(0.2640, abs=5e-4)
    assert metrics.asr(0.7, 0.7) == 0.0
    assert metrics.asr(0.4, 0.1) == pytest.approx(metrics.asr(0.8, 0.2))
    with pytest.raises(ValueError):
        metrics.asr(0.0, 0.1)


def test_report_fills_asr():
    r = metrics.EvaluationReport(0.9, 0.1, 0.45, None, 0.5, 0.0, 0.0)
    assert r.asr == pytest.approx(0.5)
    assert metrics.EvaluationReport(0.9, 0.1, None, None, None, 0.0, 0.0).asr is None


def test_threshold_at_fpr():
    s = np.arange(10.0)
    t = metrics.threshold_at_fpr(s, 0.1)
    assert (s >= t).sum() == 1
    assert (s >= metrics.threshold_at_fpr(s, 0.05)).sum() == 0
    with pytest.raises(ValueError):
        metrics.threshold_at_fpr([], 0.1)


def test_purify_compose(small_det, small_data):
    test = small_data[3].subset(np.arange(100))
    flipped = test.with_features(1.0 - test.features)
    assert metrics.purify_compose(small_det, lambda x: np.zeros(len(x)), 1.0, flipped) == accuracy(small_det, flipped).accuracy
    assert metrics.purify_compose(small_det, lambda x: np.ones(len(x)), 1.0, flipped) is None
    mixed = test.subset(np.arange(50)).with_features(np.vstack([test.features[:25], flipped.features[25:50]]))
    is_adv = np.r_[np.zeros(25), np.ones(25)]
    lookup = {row.tobytes(): a for row, a in zip(mixed.features, is_adv)}
    oracle = lambda x: np.array([lookup[r.tobytes()] for r in x])
    assert metrics.purify_compose(small_det, oracle, 0.5, mixed) == accuracy(small_det, test.subset(np.arange(25))).accuracy


def _mmd_loop(x, y, sigma):
    k = lambda a, b: math.exp(-float(np.sum((a - b) ** 2)) / (2 * sigma * sigma))
    kxx = sum(k(a, b) for a in x for b in x) / len(x) ** 2
    kyy = sum(k(a, b) for a in y for b in y) / len(y) ** 2
    kxy = sum(k(a, b) for a in x for b in y) / (len(x) * len(y))
    return kxx + kyy - 2 * kxy


def test_mmd_examples(rng):
    assert metrics.mmd2_biased([[0.0]], [[1.0]], 1.0) == pytest.approx(2 - 2 * math.exp(-0.5), abs=1e-12)
    x = rng.random((30, 4))
    assert metrics.mmd2_biased(x, x[::-1]) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        metrics.mmd2_biased(np.zeros((0, 2)), x[:, :2])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 4), st.integers(0, 10**6))
def test_mmd_matches_double_loop(n, m, d, seed):
    r = np.random.default_rng(seed)
    x, y = r.random((n, d)), r.random((m, d)) * 1.3
    sigma = metrics.median_bandwidth(np.vstack([x, y]))
    got = metrics.mmd2_biased(x, y)
    assert got == pytest.approx(_mmd_loop(x, y, sigma), abs=1e-10)
    assert got >= -1e-12
    assert metrics.mmd2_biased(y, x) == pytest.approx(got, abs=1e-12)


def test_median_bandwidth():
    assert metrics.median_bandwidth(np.array([[0.0], [1.0], [3.0]])) == 2.0
    assert metrics.median_bandwidth(np.zeros((4, 2))) == 1.0


def test_wasserstein_examples():
    assert metrics.wasserstein1_avg([0.0], [1.0]) == 1.0
    assert metrics.wasserstein1_avg([0.0, 1.0], [0.5, 0.5]) == 0.5
    x = np.random.default_rng(0).random((20, 3))
    assert metrics.wasserstein1_avg(x, x[::-1]) == 0.0


def _w1_lp(a, b):
    n, m = len(a), len(b)
    cost = np.abs(np.subtract.outer(a, b)).ravel()
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1
    for j in range(m):
        a_eq[n + j, j::m] = 1
    b_eq = np.r_[np.full(n, 1 / n), np.full(m, 1 / m)]
    return linprog(cost, A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs").fun


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0, 1), min_size=1, max_size=6),
    st.lists(st.floats(0, 1), min_size=1, max_size=6),
)
def test_w1_matches_transport_lp(a, b):
    assert metrics.wasserstein1_1d(a, b) == pytest.approx(_w1_lp(np.array(a), np.array(b)), abs=1e-9)


def test_pca_against_eigh(rng):
    x = rng.normal(size=(200, 5)) @ rng.normal(size=(5, 5))
    p = metrics.pca_density_export(x, x)
    c = np.cov(x.T, bias=True)
    vals, vecs = np.linalg.eigh(c)
    assert p.eigenvalue == pytest.approx(vals[-1], abs=1e-8)
    assert abs(p.component @ vecs[:, -1]) == pytest.approx(1.0, abs=1e-8)
    assert p.clean.var() == pytest.approx(vals[-1], abs=1e-8)
    np.testing.assert_array_equal(p.clean, p.adv)


def test_pca_axis_aligned():
    x = np.c_[np.linspace(0, 1, 50), np.full(50, 0.3)]
    p = metrics.pca_density_export(x, x)
    np.testing.assert_allclose(np.abs(p.component), [1.0, 0.0], atol=1e-12)


def test_pca_csv(tmp_path, rng):
    x = rng.random((5, 2))
    metrics.pca_density_export(x, x + 0.1).to_csv(tmp_path / "p.csv")
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "value,group" and len(lines) == 11 and lines[-1].endswith("adversarial")


def test_corr_diff(rng):
    x = rng.normal(size=(500, 4))
    x[:, 1] = x[:, 0] + 0.1 * x[:, 1]
    np.testing.assert_array_equal(metrics.corr_diff(x, x), 0.0)
    y = x.copy()
    y[:, 2] = rng.normal(size=500)
    d = metrics.corr_diff(x, y)
    mask = np.zeros((4, 4), bool)
    mask[2, :] = mask[:, 2] = True
    np.fill_diagonal(mask, False)
    assert np.all(d[~mask] < 1e-12)
    assert d[mask].max() > 0
    assert d.min() >= 0 and d.max() <= 2
