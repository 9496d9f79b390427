"""Attack-efficacy and distribution-fidelity metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .detector import Detector, accuracy
from .flow_data import FlowDataset
from .taxonomy import pearson_matrix


def asr(acc_before: float, acc_purified: float) -> float:
    """Relative accuracy drop, (before - purified) / before."""
    if acc_before <= 0:
        raise ValueError("acc_before must be positive")
    return (acc_before - acc_purified) / acc_before


def threshold_at_fpr(clean_scores, fpr: float = 0.1) -> float:
    """Smallest score threshold flagging at most ``fpr`` of the clean validation scores."""
    s = np.sort(np.asarray(clean_scores, dtype=float))
    if s.size == 0:
        raise ValueError("need clean validation scores")
    allowed = int(np.floor(fpr * s.size))
    if allowed == 0:
        return float(np.nextafter(s[-1], np.inf))
    # Flag rows with score >= threshold; ties at the cut stay unflagged by going one ulp up.
    return float(np.nextafter(s[s.size - allowed - 1], np.inf))


def purify_compose(det: Detector, scorer, threshold: float, mixed: FlowDataset) -> float | None:
    """Accuracy on the rows the adversarial-example scorer lets through.

    Rows with ``scorer(features) >= threshold`` are dropped. Returns None when
    every row is filtered out.
    """
    scores = np.asarray(scorer(mixed.features), dtype=float)
    keep = scores < threshold
    if not keep.any():
        return None
    return accuracy(det, mixed.subset(np.flatnonzero(keep))).accuracy


def sq_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.maximum(d, 0.0)


def median_bandwidth(z: np.ndarray, max_points: int = 2000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance (off-diagonal), subsampled beyond ``max_points``."""
    z = np.asarray(z, dtype=float)
    if len(z) > max_points:
        z = z[np.random.default_rng(seed).choice(len(z), max_points, replace=False)]
    d = np.sqrt(sq_distances(z, z)[np.triu_indices(len(z), 1)])
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def mmd2_biased(x, y, bandwidth: float | None = None) -> float:
    """Biased squared MMD with the Gaussian kernel exp(-|a - b|^2 / (2 sigma^2)).

    ``bandwidth=None`` uses the median heuristic over the pooled sample.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if len(x) == 0 or len(y) == 0:
        raise ValueError("both samples must be nonempty")
    sigma = median_bandwidth(np.vstack([x, y])) if bandwidth is None else float(bandwidth)
    gamma = 1.0 / (2.0 * sigma * sigma)
    kxx = np.exp(-gamma * sq_distances(x, x)).mean()
    kyy = np.exp(-gamma * sq_distances(y, y)).mean()
    kxy = np.exp(-gamma * sq_distances(x, y)).mean()
    return float(kxx + kyy - 2.0 * kxy)


def wasserstein1_1d(a, b) -> float:
    """W1 between two 1-D empirical distributions via their quantile functions."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    b = np.sort(np.asarray(b, dtype=float).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # Integrate |F_a^-1(q) - F_b^-1(q)| over the merged quantile grid.
    qa = np.arange(1, a.size + 1) / a.size
    qb = np.arange(1, b.size + 1) / b.size
    edges = np.concatenate([[0.0], np.union1d(qa, qb)])
    mid = (edges[:-1] + edges[1:]) / 2.0
    ia = np.minimum((mid * a.size).astype(np.int64), a.size - 1)
    ib = np.minimum((mid * b.size).astype(np.int64), b.size - 1)
    return float(np.sum(np.diff(edges) * np.abs(a[ia] - b[ib])))


def wasserstein1_avg(x, y) -> float:
    """Per-feature W1 between the empirical marginals, averaged over features."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        return wasserstein1_1d(x, y)
    return float(np.mean([wasserstein1_1d(x[:, j], y[:, j]) for j in range(x.shape[1])]))


def top_eigvec(cov: np.ndarray, iters: int = 1000, tol: float = 1e-13, seed: int = 0):
    """Leading eigenpair of a symmetric PSD matrix by power iteration."""
    n = cov.shape[0]
    v = np.random.default_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        # Sign-align so convergence is measured on direction, not orientation.
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        lam = float(v @ cov @ v)
        if done:
            break
    # Deterministic orientation: largest-magnitude component positive.
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return lam, v


@dataclass
class PcaProjection:
    component: np.ndarray
    eigenvalue: float
    mean: np.ndarray
    clean: np.ndarray
    adv: np.ndarray

    def rows(self):
        for v in self.clean:
            yield float(v), "clean"
        for v in self.adv:
            yield float(v), "adversarial"

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["value", "group"])
            for value, group in self.rows():
                w.writerow([repr(value), group])


def pca_density_export(clean, adv) -> PcaProjection:
    """Project both sets on the first principal component of the clean data."""
    clean = np.asarray(clean, dtype=float)
    adv = np.asarray(adv, dtype=float)
    mu = clean.mean(axis=0)
    centered = clean - mu
    cov = centered.T @ centered / len(clean)
    lam, v = top_eigvec(cov)
    return PcaProjection(v, lam, mu, centered @ v, (adv - mu) @ v)


def corr_diff(clean, adv) -> np.ndarray:
    """Elementwise |PCC(clean) - PCC(adv)|."""
    return np.abs(pearson_matrix(np.asarray(clean)) - pearson_matrix(np.asarray(adv)))


def matrix_to_csv(matrix: np.ndarray, names, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", *names])
        for name, row in zip(names, matrix):
            w.writerow([name, *(repr(float(v)) for v in row)])


@dataclass
class EvaluationReport:
    acc_before: float
    acc_after: float
    acc_purified: float | None
    asr: float | None
    auc_roc: float | None
    mmd2: float
    wasserstein: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.asr is None and self.acc_purified is not None and self.acc_before > 0:
            self.asr = asr(self.acc_before, self.acc_purified)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
