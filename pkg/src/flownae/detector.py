"""The target NIDS classifier: training, prediction and accuracy with confusion counts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .flow_data import FlowDataset, schema_hash

MLP_1L = (50,)
MLP_5L = (50, 50, 50, 50, 50)


class SchemaMismatch(ValueError):
    """Dataset feature names do not match what a model was trained on."""


@dataclass(frozen=True)
class Detector:
    model: nn.MlpModel
    feature_names: tuple[str, ...]
    train_meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.model.input_dim != len(self.feature_names):
            raise ValueError("model input dim does not match the feature count")

    def check_schema(self, ds: FlowDataset) -> None:
        if tuple(ds.feature_names) != tuple(self.feature_names):
            raise SchemaMismatch(
                f"schema drift: dataset hash {schema_hash(ds.feature_names)} "
                f"!= detector hash {schema_hash(self.feature_names)}"
            )

    def proba(self, x) -> np.ndarray:
        return nn.predict_proba(self.model, x)

    def predict(self, x):
        return predict(self, x)

    def save(self, path) -> None:
        nn.save_model(
            self.model, path, metadata={"feature_names": list(self.feature_names), "train_meta": self.train_meta}
        )

    @classmethod
    def load(cls, path) -> "Detector":
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        meta = doc.get("metadata", {})
        return cls(nn.MlpModel.from_json(doc), tuple(meta["feature_names"]), meta.get("train_meta", {}))


def train_detector(d1: FlowDataset, hidden=MLP_1L, cfg: nn.TrainConfig = nn.TrainConfig()) -> Detector:
    if d1.n_rows == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(np.unique(d1.labels)) < 2:
        raise ValueError("training data must contain both benign and malicious flows")
    model = nn.init((d1.n_features, *hidden, 2), cfg.seed)
    model = nn.train(model, d1, cfg)
    meta = {"seed": cfg.seed, "config": asdict(cfg), "hidden": list(hidden), "dataset": d1.fingerprint()}
    return Detector(model, d1.feature_names, meta)


def predict_from_proba(probs: np.ndarray) -> np.ndarray:
    # Exact ties alert (label 1).
    probs = np.asarray(probs)
    return (probs[..., 1] >= probs[..., 0]).astype(np.int64)


def predict(det: Detector, x):
    """Label 1 (malicious) or 0 per row; a 0.5/0.5 tie resolves to 1."""
    labels = predict_from_proba(det.proba(x))
    return int(labels) if labels.ndim == 0 else labels


@dataclass(frozen=True)
class AccuracyResult:
    accuracy: float
    tp: int
    tn: int
    fp: int
    fn: int

    def __float__(self):
        return self.accuracy


def confusion(pred, labels) -> AccuracyResult:
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    total = tp + tn + fp + fn
    return AccuracyResult((tp + tn) / total if total else float("nan"), tp, tn, fp, fn)


def accuracy(det: Detector, ds: FlowDataset) -> AccuracyResult:
    det.check_schema(ds)
    if ds.n_rows == 0:
        return AccuracyResult(float("nan"), 0, 0, 0, 0)
    return confusion(predict(det, ds.features), ds.labels)
