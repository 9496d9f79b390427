"""Adversarial-example detector in the style of kernel density + Bayesian uncertainty.

Two per-input scores are combined by a logistic regression:

* density: negative log KDE of the last hidden layer, using the bank of clean
  training activations for the class the detector predicts;
* uncertainty: variance of the malicious-class probability under MC dropout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from . import nn
from .detector import Detector, predict_from_proba
from .flow_data import FlowDataset
from .metrics import median_bandwidth, sq_distances

DEFAULT_DROPOUT = 0.5
DEFAULT_PASSES = 50


def last_hidden(det: Detector, x) -> np.ndarray:
    probs, hidden = nn.forward(det.model, np.atleast_2d(x))
    if not hidden:
        raise ValueError("detector has no hidden layer")
    return hidden[-1]


@dataclass(frozen=True)
class KdeModel:
    banks: tuple[np.ndarray, np.ndarray]
    bandwidths: tuple[float, float]

    def __post_init__(self):
        for bank, bw in zip(self.banks, self.bandwidths):
            if len(bank) == 0:
                raise ValueError("every class bank needs at least one point")
            if not (math.isfinite(bw) and bw > 0):
                raise ValueError("bandwidth must be finite and positive")

    def log_density(self, z: np.ndarray, cls: np.ndarray) -> np.ndarray:
        """Log of the Gaussian KDE at hidden vectors ``z`` under the banks chosen by ``cls``."""
        z = np.atleast_2d(z)
        cls = np.broadcast_to(np.asarray(cls), (len(z),))
        out = np.empty(len(z))
        for c in (0, 1):
            rows = np.flatnonzero(cls == c)
            if rows.size == 0:
                continue
            bank, h = self.banks[c], self.bandwidths[c]
            d = z.shape[1]
            log_k = -sq_distances(z[rows], bank) / (2.0 * h * h)
            log_norm = -0.5 * d * math.log(2.0 * math.pi * h * h)
            out[rows] = logsumexp(log_k, axis=1) - math.log(len(bank)) + log_norm
        return out

    def density(self, z, cls) -> np.ndarray:
        return np.exp(self.log_density(z, cls))


def fit_kde(det: Detector, clean: FlowDataset, bandwidth: float | None = None) -> KdeModel:
    """Bank last-hidden activations of clean rows by the detector's predicted class.

    ``bandwidth=None`` uses each bank's median pairwise distance.
    """
    det.check_schema(clean)
    if bandwidth is not None and not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    z = last_hidden(det, clean.features)
    pred = predict_from_proba(det.proba(clean.features))
    banks = tuple(z[pred == c] for c in (0, 1))
    if any(len(b) == 0 for b in banks):
        raise ValueError("a class bank is empty: the detector never predicts one of the classes")
    bws = tuple(float(bandwidth) if bandwidth is not None else median_bandwidth(b) for b in banks)
    return KdeModel(banks, bws)


def density_score(k: KdeModel, det: Detector, x) -> np.ndarray | float:
    """-log KDE density under the bank of the predicted class (higher = more anomalous)."""
    x = np.asarray(x, dtype=float)
    z = last_hidden(det, x)
    cls = predict_from_proba(det.proba(np.atleast_2d(x)))
    s = -k.log_density(z, cls)
    return float(s[0]) if x.ndim == 1 else s


def uncertainty_score(det: Detector, x, rate: float = DEFAULT_DROPOUT, n_passes: int = DEFAULT_PASSES, seed: int = 0):
    """Variance of the malicious-class probability across MC-dropout passes."""
    x = np.asarray(x, dtype=float)
    draws = nn.mc_dropout_predict(det.model, np.atleast_2d(x), rate, n_passes, seed)[..., 1]
    var = draws.var(axis=0)
    return float(var[0]) if x.ndim == 1 else var


@dataclass(frozen=True)
class CombinerModel:
    weights: np.ndarray
    bias: float
    # Feature standardization fitted on the training scores.
    mean: np.ndarray
    scale: np.ndarray

    def __post_init__(self):
        if not (np.isfinite(self.weights).all() and math.isfinite(self.bias)):
            raise ValueError("combiner weights must be finite")

    def decision(self, scores) -> np.ndarray:
        s = (np.atleast_2d(np.asarray(scores, dtype=float)) - self.mean) / self.scale
        return s @ self.weights + self.bias

    def proba(self, scores) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision(scores)))


def fit_combiner(scores_clean, scores_adv, lr: float = 0.5, steps: int = 2000, l2: float = 1e-4) -> CombinerModel:
    """Logistic regression by full-batch gradient descent; label 1 = adversarial.

    A small L2 penalty keeps the weights finite on perfectly separable scores.
    """
    a = np.atleast_2d(np.asarray(scores_clean, dtype=float))
    b = np.atleast_2d(np.asarray(scores_adv, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be nonempty")
    x = np.vstack([a, b])
    y = np.concatenate([np.zeros(len(a)), np.ones(len(b))])
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    xs = (x - mean) / scale
    w = np.zeros(x.shape[1])
    bias = 0.0
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(xs @ w + bias)))
        err = p - y
        w -= lr * (xs.T @ err / len(y) + l2 * w)
        bias -= lr * float(err.mean())
    return CombinerModel(w, bias, mean, scale)


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "tpr", "fpr"])
            for t, tp, fp in zip(self.thresholds, self.tpr, self.fpr):
                w.writerow([repr(float(t)), repr(float(tp)), repr(float(fp))])


def auc_roc(scores, labels) -> RocCurve:
    """ROC points at every distinct threshold plus the rank-statistic AUC (ties count one half)."""
    s = np.asarray(scores, dtype=float).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative labels")
    ranks = rankdata(s)  # average ranks for ties
    auc = (ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s_sorted)), len(s_sorted) - 1]
    tps = np.cumsum(y_sorted == 1)[last_of_run]
    fps = np.cumsum(y_sorted == 0)[last_of_run]
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return RocCurve(thresholds, tpr, fpr, float(auc))


@dataclass
class ArtifactDetector:
    """Fitted density bank and combiner, scoring rows for "adversarial-ness"."""

    det: Detector
    kde: KdeModel
    combiner: CombinerModel
    rate: float = DEFAULT_DROPOUT
    n_passes: int = DEFAULT_PASSES
    seed: int = 0

    def features(self, x) -> np.ndarray:
        return score_features(self.det, self.kde, x, self.rate, self.n_passes, self.seed)

    def score(self, x) -> np.ndarray:
        return self.combiner.decision(self.features(x))

    __call__ = score


def score_features(det, kde, x, rate=DEFAULT_DROPOUT, n_passes=DEFAULT_PASSES, seed=0) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.column_stack([density_score(kde, det, x), uncertainty_score(det, x, rate, n_passes, seed)])


def fit_artifact(det, kde, clean_x, adv_x, rate=DEFAULT_DROPOUT, n_passes=DEFAULT_PASSES, seed=0) -> ArtifactDetector:
    comb = fit_combiner(score_features(det, kde, clean_x, rate, n_passes, seed), score_features(det, kde, adv_x, rate, n_passes, seed))
    return ArtifactDetector(det, kde, comb, rate, n_passes, seed)


def detect_auc(det: Detector, k: KdeModel, comb: CombinerModel, clean_eval, adv_eval, rate=DEFAULT_DROPOUT, n_passes=DEFAULT_PASSES, seed=0) -> float:
    """AUC of the combined score separating held-out adversarial rows (positive) from clean ones."""
    clean_eval = getattr(clean_eval, "features", clean_eval)
    adv_eval = getattr(adv_eval, "features", adv_eval)
    s_clean = comb.decision(score_features(det, k, clean_eval, rate, n_passes, seed))
    s_adv = comb.decision(score_features(det, k, adv_eval, rate, n_passes, seed))
    labels = np.r_[np.zeros(len(s_clean)), np.ones(len(s_adv))]
    return auc_roc(np.r_[s_clean, s_adv], labels).auc
