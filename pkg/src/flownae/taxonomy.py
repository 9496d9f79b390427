"""Correlation-driven split of features into Relative (clustered) and Discrete (singleton) sets.

Features are clustered bottom-up under average linkage on the distance
sqrt(2 * (1 - r)). The dendrogram is cut where the Calinski-Harabasz index
drops the most between one candidate cut and the next coarser one.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .flow_data import FlowDataset


class NoValidCut(ValueError):
    """Raised when the dendrogram offers fewer than two scoreable cuts."""


# CH index is undefined for k == 1 or k == n; callers must check for this sentinel.
UNDEFINED = None


def pearson_matrix(ds_or_features) -> np.ndarray:
    """Pearson correlation between feature columns (population moments).

    Constant columns get r = 0 against every other feature and 1 on the diagonal.
    """
    x = ds_or_features.features if isinstance(ds_or_features, FlowDataset) else ds_or_features
    x = np.asarray(x, dtype=float)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 rows for correlations")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    std = np.sqrt(np.diag(cov))
    const = std <= 1e-12 * np.maximum(1.0, np.abs(x).max(axis=0))
    safe = np.where(const, 1.0, std)
    r = cov / np.outer(safe, safe)
    r[const, :] = 0.0
    r[:, const] = 0.0
    r = np.clip((r + r.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(r, 1.0)
    return r


def correlation_distance(r: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.clip(2.0 * (1.0 - np.asarray(r, dtype=float)), 0.0, 4.0))
    if d.ndim == 2:
        np.fill_diagonal(d, 0.0)
    return d


@dataclass(frozen=True)
class Dendrogram:
    """Merge list; cluster ids follow the scipy convention (new cluster n + i at merge i)."""

    merges: tuple[tuple[int, int, float], ...]
    n_leaves: int

    @property
    def heights(self) -> np.ndarray:
        return np.array([h for _, _, h in self.merges])

    def assignment(self, height: float) -> np.ndarray:
        """Flat cluster labels (0..k-1, ordered by smallest member) for merges at or below height."""
        parent = list(range(self.n_leaves + len(self.merges)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for idx, (a, b, h) in enumerate(self.merges):
            if h > height:
                break
            new = self.n_leaves + idx
            parent[find(a)] = new
            parent[find(b)] = new
        roots = [find(i) for i in range(self.n_leaves)]
        relabel: dict[int, int] = {}
        return np.array([relabel.setdefault(r, len(relabel)) for r in roots])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["a", "b", "height"])
            for a, b, h in self.merges:
                w.writerow([a, b, repr(float(h))])


def agglomerate(d: np.ndarray) -> Dendrogram:
    """Average-linkage agglomeration; ties go to the pair with the lowest (i, j) row index."""
    d = np.asarray(d, dtype=float)
    n = d.shape[0]
    if n < 2 or d.shape != (n, n):
        raise ValueError("need a square distance matrix over at least 2 points")
    # Active clusters are tracked by row slot; slot i holds cluster id ids[i].
    dist = d.copy()
    np.fill_diagonal(dist, np.inf)
    sizes = np.ones(n)
    ids = list(range(n))
    active = np.ones(n, dtype=bool)
    merges = []
    for step in range(n - 1):
        masked = np.where(active[:, None] & active[None, :], dist, np.inf)
        flat = int(np.argmin(masked))  # row-major: first minimum is the lowest (i, j)
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        h = float(masked[i, j])
        a, b = sorted((ids[i], ids[j]))
        merges.append((a, b, h))
        merged = (sizes[i] * dist[i] + sizes[j] * dist[j]) / (sizes[i] + sizes[j])
        dist[i, :] = merged
        dist[:, i] = merged
        dist[i, i] = np.inf
        sizes[i] += sizes[j]
        active[j] = False
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        ids[i] = n + step
    # Average linkage is monotone, but float rounding can flip equal heights by an ulp.
    fixed, top = [], -np.inf
    for a, b, h in merges:
        top = max(top, h)
        fixed.append((a, b, top))
    return Dendrogram(tuple(fixed), n)


def ch_index(points: np.ndarray, assignment) -> float | None:
    """Calinski-Harabasz index of ``points`` (one row per point) under ``assignment``.

    Returns ``None`` when k == 1 or k == n, and ``inf`` when within-cluster
    dispersion is zero.
    """
    x = np.asarray(points, dtype=float)
    labels = np.asarray(assignment)
    n = x.shape[0]
    clusters = np.unique(labels)
    k = len(clusters)
    if k < 2 or k >= n:
        return UNDEFINED
    mu = x.mean(axis=0)
    between = within = 0.0
    for c in clusters:
        members = x[labels == c]
        centroid = members.mean(axis=0)
        between += len(members) * float(np.sum((centroid - mu) ** 2))
        within += float(np.sum((members - centroid) ** 2))
    if within == 0.0:
        return math.inf
    return (between / (k - 1)) / (within / (n - k))


def candidate_heights(t: Dendrogram) -> list[float]:
    levels = np.unique(t.heights)
    return [float((lo + hi) / 2.0) for lo, hi in zip(levels[:-1], levels[1:])]


def select_cut(t: Dendrogram, features: np.ndarray) -> tuple[float, list[tuple[float, float]]]:
    """Pick the cut height whose CH index exceeds the next coarser cut's by the most.

    ``features`` is the (rows x features) data matrix; features are the points.
    Returns ``(h_star, ch_trace)`` with the trace listing (height, CH) for every
    scoreable candidate, finest first.
    """
    points = np.asarray(features, dtype=float).T
    trace = []
    for h in candidate_heights(t):
        ch = ch_index(points, t.assignment(h))
        if ch is not UNDEFINED:
            trace.append((h, ch))
    if len(trace) < 2:
        raise NoValidCut("no valid cut")
    best_h, best_gap = None, -math.inf
    for (h, ch), (_, ch_coarser) in zip(trace[:-1], trace[1:]):
        if math.isinf(ch) and math.isinf(ch_coarser):
            gap = 0.0
        else:
            gap = ch - ch_coarser
        # Strict ">" keeps the finer cut on ties.
        if gap > best_gap:
            best_h, best_gap = h, gap
    return best_h, trace


@dataclass(frozen=True)
class FeatureCategorization:
    relative: frozenset[int]
    discrete: frozenset[int]
    cut_height: float
    ch_trace: tuple[tuple[float, float], ...] = ()
    feature_names: tuple[str, ...] = ()
    dendrogram: Dendrogram | None = field(default=None, compare=False)
    source: str = "clustering"

    def __post_init__(self):
        if self.relative & self.discrete:
            raise ValueError("relative and discrete sets overlap")
        if self.feature_names and (self.relative | self.discrete) != set(range(len(self.feature_names))):
            raise ValueError("categorization must cover every feature exactly once")

    @property
    def discrete_mask(self) -> np.ndarray:
        mask = np.zeros(len(self.feature_names), dtype=bool)
        mask[sorted(self.discrete)] = True
        return mask

    def to_json(self) -> dict:
        return {
            "cut_height": self.cut_height,
            "ch_trace": [[h, ch] for h, ch in self.ch_trace],
            "relative": [self.feature_names[i] for i in sorted(self.relative)],
            "discrete": [self.feature_names[i] for i in sorted(self.discrete)],
            "source": self.source,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @classmethod
    def from_json(cls, doc: dict, feature_names) -> "FeatureCategorization":
        names = tuple(feature_names)
        index = {n: i for i, n in enumerate(names)}
        unknown = [n for n in list(doc["relative"]) + list(doc["discrete"]) if n not in index]
        if unknown:
            raise KeyError(f"categorization names not in schema: {unknown}")
        return cls(
            relative=frozenset(index[n] for n in doc["relative"]),
            discrete=frozenset(index[n] for n in doc["discrete"]),
            cut_height=float(doc["cut_height"]),
            ch_trace=tuple((float(h), float(c)) for h, c in doc.get("ch_trace", [])),
            feature_names=names,
            source=doc.get("source", "clustering"),
        )

    @classmethod
    def load(cls, path, feature_names) -> "FeatureCategorization":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh), feature_names)


def categorize(ds: FlowDataset) -> FeatureCategorization:
    if ds.n_features < 3:
        raise NoValidCut("no valid cut")
    tree = agglomerate(correlation_distance(pearson_matrix(ds)))
    h_star, trace = select_cut(tree, ds.features)
    labels = tree.assignment(h_star)
    sizes = np.bincount(labels)
    clustered = sizes[labels] >= 2
    return FeatureCategorization(
        relative=frozenset(np.flatnonzero(clustered).tolist()),
        discrete=frozenset(np.flatnonzero(~clustered).tolist()),
        cut_height=h_star,
        ch_trace=tuple(trace),
        feature_names=ds.feature_names,
        dendrogram=tree,
    )


def override(feature_names, discrete_names) -> FeatureCategorization:
    """Hand-picked discrete set that bypasses clustering (ablation escape hatch)."""
    names = tuple(feature_names)
    wanted = set(discrete_names)
    missing = wanted - set(names)
    if missing:
        raise KeyError(f"unknown features in override: {sorted(missing)}")
    discrete = frozenset(i for i, n in enumerate(names) if n in wanted)
    return FeatureCategorization(
        relative=frozenset(range(len(names))) - discrete,
        discrete=discrete,
        cut_height=math.nan,
        feature_names=names,
        source="override",
    )
