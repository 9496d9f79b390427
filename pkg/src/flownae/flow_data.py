"""Flow-feature datasets: CSV ingestion, min-max scaling, splits and a synthetic generator."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for malformed flow CSVs or invalid dataset construction."""


@dataclass(frozen=True)
class FlowDataset:
    features: np.ndarray
    feature_names: tuple[str, ...]
    labels: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim != 2:
            features = features.reshape(-1, len(self.feature_names))
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        names = tuple(self.feature_names)
        if features.shape[1] != len(names):
            raise DataError(f"{features.shape[1]} feature columns but {len(names)} names")
        if len(set(names)) != len(names):
            raise DataError("feature names must be distinct")
        if labels.shape[0] != features.shape[0]:
            raise DataError(f"{features.shape[0]} rows but {labels.shape[0]} labels")
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")
        if self.normalized and features.size and (features.min() < 0.0 or features.max() > 1.0):
            raise DataError("normalized dataset has values outside [0, 1]")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, rows) -> "FlowDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return replace(self, features=self.features[rows], labels=self.labels[rows])

    def with_features(self, features: np.ndarray) -> "FlowDataset":
        return replace(self, features=np.asarray(features, dtype=float))

    def fingerprint(self) -> dict:
        """Row count plus a hash of the feature schema (names in order)."""
        return {"n_rows": int(self.n_rows), "schema_hash": schema_hash(self.feature_names)}


def schema_hash(names) -> str:
    return hashlib.sha256("\x1f".join(names).encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class ColumnSpec:
    label_column: str = "Label"
    drop_columns: tuple[str, ...] = ()
    positive_label_values: tuple[str, ...] = ()
    # Every label not listed as positive must be in here; empty means "anything else is benign".
    negative_label_values: tuple[str, ...] = ()

    def __post_init__(self):
        if self.label_column in self.drop_columns:
            raise DataError("label column cannot also be dropped")


@dataclass(frozen=True)
class SynthSpec:
    n_flows: int = 2000
    groups: tuple[int, ...] = (3, 3)
    n_independent: int = 4
    class_separation: float = 1.5
    noise_sigma: float = 0.01
    # Share of the class shift carried by each independent latent, relative to a group latent.
    independent_weight: float = 1.0

    def __post_init__(self):
        if self.independent_weight < 0:
            raise DataError("independent_weight must be >= 0")
        if any(g < 2 for g in self.groups):
            raise DataError("every correlated group needs at least 2 features")
        if self.n_flows < 2:
            raise DataError("n_flows must be at least 2")
        if self.class_separation < 0 or self.noise_sigma <= 0:
            raise DataError("class_separation must be >= 0 and noise_sigma > 0")
        if self.n_features < 1:
            raise DataError("synthetic spec has no features")

    @property
    def n_features(self) -> int:
        return sum(self.groups) + self.n_independent


def load_csv(path, spec: ColumnSpec) -> FlowDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} has no header row") from None
        if spec.label_column not in header:
            raise DataError(f"missing label column {spec.label_column!r}")
        label_idx = header.index(spec.label_column)
        drop = set(spec.drop_columns)
        keep = [i for i, h in enumerate(header) if i != label_idx and h not in drop]
        positive = {v.strip().lower() for v in spec.positive_label_values}
        negative = {v.strip().lower() for v in spec.negative_label_values}

        rows, labels = [], []
        for line_no, cells in enumerate(reader, start=2):
            if not cells:
                continue
            if len(cells) != len(header):
                raise DataError(f"line {line_no}: expected {len(header)} cells, got {len(cells)}")
            raw_label = cells[label_idx].strip().lower()
            if raw_label in positive:
                labels.append(1)
            elif not negative or raw_label in negative:
                labels.append(0)
            else:
                raise DataError(f"line {line_no}: unmapped label value {cells[label_idx]!r}")
            row = []
            for i in keep:
                try:
                    value = float(cells[i])
                except ValueError:
                    raise DataError(
                        f"line {line_no}: non-numeric cell in column {header[i]!r}: {cells[i]!r}"
                    ) from None
                if not math.isfinite(value):
                    raise DataError(f"line {line_no}: non-numeric cell in column {header[i]!r}")
                row.append(value)
            rows.append(row)

    names = tuple(header[i] for i in keep)
    features = np.asarray(rows, dtype=float).reshape(len(rows), len(names))
    return FlowDataset(features, names, np.asarray(labels, dtype=np.int64), normalized=False)


def save_csv(ds: FlowDataset, path, label_column: str = "Label", extra_columns: dict | None = None) -> None:
    """Write features, then the 0/1 label, then any per-row extra columns."""
    extra = dict(extra_columns or {})
    for name, values in extra.items():
        if len(values) != ds.n_rows:
            raise DataError(f"extra column {name!r} has {len(values)} values for {ds.n_rows} rows")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*ds.feature_names, label_column, *extra])
        for i in range(ds.n_rows):
            cells = [repr(float(v)) for v in ds.features[i]]
            cells.append(str(int(ds.labels[i])))
            cells += [_cell(values[i]) for values in extra.values()]
            w.writerow(cells)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def load_normalized(path, label_column: str = "Label", drop_columns=()) -> FlowDataset:
    """Read back a CSV written by ``save_csv`` (0/1 labels, values already in [0, 1])."""
    spec = ColumnSpec(label_column, tuple(drop_columns), ("1",), ("0",))
    return replace(load_csv(path, spec), normalized=True)


@dataclass(frozen=True)
class MinMaxTable:
    feature_names: tuple[str, ...]
    mins: np.ndarray
    maxs: np.ndarray

    def apply(self, features: np.ndarray) -> np.ndarray:
        span = self.maxs - self.mins
        safe = np.where(span > 0, span, 1.0)
        out = (np.asarray(features, dtype=float) - self.mins) / safe
        out[:, span <= 0] = 0.0
        return np.clip(out, 0.0, 1.0)

    def invert(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=float) * (self.maxs - self.mins) + self.mins

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "min", "max"])
            for name, lo, hi in zip(self.feature_names, self.mins, self.maxs):
                w.writerow([name, repr(float(lo)), repr(float(hi))])

    @classmethod
    def from_csv(cls, path) -> "MinMaxTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        return cls(
            tuple(r["feature"] for r in rows),
            np.array([float(r["min"]) for r in rows]),
            np.array([float(r["max"]) for r in rows]),
        )


def normalize(ds: FlowDataset) -> tuple[FlowDataset, MinMaxTable]:
    """Min-max scale every column to [0, 1]; constant columns become 0."""
    if ds.normalized:
        raise DataError("dataset is already normalized")
    if ds.n_rows == 0:
        raise DataError("cannot normalize an empty dataset")
    mins = ds.features.min(axis=0)
    maxs = ds.features.max(axis=0)
    table = MinMaxTable(ds.feature_names, mins, maxs)
    scaled = table.apply(ds.features)
    return replace(ds, features=scaled, normalized=True), table


@dataclass(frozen=True)
class SplitResult:
    first: FlowDataset
    second: FlowDataset
    first_rows: np.ndarray
    second_rows: np.ndarray
    stratified: bool = True

    def __iter__(self):
        return iter((self.first, self.second))


def _stratified_take(labels: np.ndarray, n_first: int, rng: np.random.Generator):
    """Row indices for the first part, allocating n_first across classes proportionally."""
    classes = np.unique(labels)
    perms = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    counts = {c: len(perms[c]) for c in classes}
    m = len(labels)
    quota = {c: n_first * counts[c] / m for c in classes}
    take = {c: int(math.floor(quota[c])) for c in classes}
    leftover = n_first - sum(take.values())
    # Largest remainder, then class order, gets the spare rows.
    order = sorted(classes, key=lambda c: (-(quota[c] - take[c]), c))
    for c in order[:leftover]:
        take[c] += 1
    if any(take[c] > counts[c] for c in classes):
        return None
    return np.sort(np.concatenate([perms[c][: take[c]] for c in classes]))


def _partition(ds: FlowDataset, n_first: int, seed: int) -> SplitResult:
    if ds.n_rows < 2:
        raise DataError("need at least 2 rows to split")
    rng = np.random.default_rng(seed)
    first = _stratified_take(ds.labels, n_first, rng)
    stratified = first is not None and len(np.unique(ds.labels)) > 1
    if first is None or not stratified:
        first = np.sort(np.random.default_rng(seed).permutation(ds.n_rows)[:n_first])
    mask = np.zeros(ds.n_rows, dtype=bool)
    mask[first] = True
    second = np.flatnonzero(~mask)
    return SplitResult(ds.subset(first), ds.subset(second), first, second, stratified)


def split(ds: FlowDataset, seed: int) -> SplitResult:
    """Disjoint halves of sizes ceil(m/2) and floor(m/2), stratified by label when possible.

    The result unpacks as ``d1, d2``; ``stratified`` is False when the
    unstratified fallback was used.
    """
    return _partition(ds, int(math.ceil(ds.n_rows / 2)), seed)


def holdout(ds: FlowDataset, fraction: float, seed: int) -> SplitResult:
    """Carve a stratified evaluation set of ``round(fraction * m)`` rows out as ``second``."""
    if not 0.0 < fraction < 1.0:
        raise DataError("holdout fraction must be in (0, 1)")
    n_test = min(max(int(round(fraction * ds.n_rows)), 1), ds.n_rows - 1)
    return _partition(ds, ds.n_rows - n_test, seed)


def synth_generate(spec: SynthSpec, seed: int) -> FlowDataset:
    """Planted-structure flows: correlated feature groups plus independent features.

    Each group shares one Gaussian latent; its members are positive affine maps
    of that latent plus ``noise_sigma`` noise. Independent features are their
    own latents. Malicious rows (half, in random order) have their latents shifted
    by ``class_separation`` along a fixed unit direction (group latents weight 1,
    independent latents ``independent_weight``), so only the latents, never the
    within-group structure, carry the class signal.
    """
    rng = np.random.default_rng(seed)
    n_groups = len(spec.groups)
    n_latent = n_groups + spec.n_independent
    m = spec.n_flows

    labels = np.zeros(m, dtype=np.int64)
    labels[rng.permutation(m)[: m // 2]] = 1
    direction = np.r_[np.ones(n_groups), np.full(spec.n_independent, spec.independent_weight)]
    direction /= np.linalg.norm(direction)
    latents = rng.standard_normal((m, n_latent))
    latents += spec.class_separation * labels[:, None] * direction

    columns, names = [], []
    for g, size in enumerate(spec.groups):
        scale = rng.uniform(0.5, 1.5, size=size)
        offset = rng.uniform(-1.0, 1.0, size=size)
        noise = rng.standard_normal((m, size)) * spec.noise_sigma
        columns.append(latents[:, [g]] * scale + offset + noise)
        names += [f"g{g}_f{j}" for j in range(size)]
    if spec.n_independent:
        columns.append(latents[:, n_groups:])
        names += [f"ind{j}" for j in range(spec.n_independent)]

    raw = FlowDataset(np.hstack(columns), tuple(names), labels, normalized=False)
    return normalize(raw)[0]
