"""Small feed-forward networks with exact reverse-mode gradients.

Weights are stored as (fan_in, fan_out) matrices so a batch ``X`` of shape
(rows, fan_in) maps to ``X @ W + b``. Hidden layers use ReLU; the head is
either a 2-way softmax (classifiers) or linear (the diffusion denoiser).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    head: str = "softmax"

    def __post_init__(self):
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and bias vector per layer transition")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[k], self.layer_dims[k + 1]) or b.shape != (self.layer_dims[k + 1],):
                raise ValueError(f"layer {k} parameter shapes do not match layer_dims")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError("model parameters must be finite")
        if self.head not in ("softmax", "linear"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "layer_dims": list(self.layer_dims),
            "activation": "relu",
            "head": self.head,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MlpModel":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
        if doc.get("activation", "relu") != "relu":
            raise ValueError("only relu checkpoints are supported")
        dims = tuple(int(d) for d in doc["layer_dims"])
        weights = tuple(
            np.asarray(w, dtype=float).reshape(dims[k], dims[k + 1]) for k, w in enumerate(doc["weights"])
        )
        biases = tuple(np.asarray(b, dtype=float) for b in doc["biases"])
        return cls(dims, weights, biases, doc.get("head", "softmax"))


def save_model(model: MlpModel, path, **extra) -> None:
    doc = model.to_json()
    doc.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_model(path) -> MlpModel:
    with open(path, encoding="utf-8") as fh:
        return MlpModel.from_json(json.load(fh))


def init(layer_dims, seed: int, head: str = "softmax") -> MlpModel:
    """He-normal weights, zero biases."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"invalid layer dims {layer_dims!r}")
    rng = np.random.default_rng(seed)
    weights = tuple(rng.standard_normal((a, b)) * np.sqrt(2.0 / a) for a, b in zip(dims[:-1], dims[1:]))
    biases = tuple(np.zeros(b) for b in dims[1:])
    return MlpModel(dims, weights, biases, head)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _as_batch(model: MlpModel, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.input_dim:
        raise ValueError(f"input has {x.shape[1]} features, model expects {model.input_dim}")
    return x, single


def forward_batch(model: MlpModel, x: np.ndarray, dropout_masks=None):
    """Raw outputs (logits or linear values) plus the cache needed by ``backward``.

    ``dropout_masks`` is an optional list with one pre-scaled multiplier array per
    hidden layer.
    """
    acts = [x]
    pre = []
    h = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        if k == last:
            return z, (acts, pre, dropout_masks)
        h = np.maximum(z, 0.0)
        if dropout_masks is not None:
            h = h * dropout_masks[k]
        acts.append(h)
    raise AssertionError("unreachable")


def backward(model: MlpModel, cache, grad_out: np.ndarray):
    """Parameter gradients and input gradient given dLoss/dOutput for the batch."""
    acts, pre, masks = cache
    gw = [None] * len(model.weights)
    gb = [None] * len(model.biases)
    g = grad_out
    for k in range(len(model.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ g
        gb[k] = g.sum(axis=0)
        g = g @ model.weights[k].T
        if k > 0:
            if masks is not None:
                g = g * masks[k - 1]
            g = g * (pre[k - 1] > 0)
    return gw, gb, g


def forward(model: MlpModel, x):
    """Class probabilities and the list of hidden-layer activations.

    Works on one vector or a batch; the hidden list holds one array per hidden
    layer (the last entry is what density-based detectors consume).
    """
    xb, single = _as_batch(model, x)
    out, (acts, _, _) = forward_batch(model, xb)
    probs = softmax(out) if model.head == "softmax" else out
    hidden = acts[1:]
    if single:
        return probs[0], [h[0] for h in hidden]
    return probs, hidden


def predict_proba(model: MlpModel, x) -> np.ndarray:
    return forward(model, x)[0]


def cross_entropy(model: MlpModel, x, y) -> np.ndarray:
    """Per-row cross-entropy of the true labels."""
    xb, single = _as_batch(model, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    logits, _ = forward_batch(model, xb)
    loss = -log_softmax(logits)[np.arange(len(xb)), y]
    return loss[0] if single else loss


def input_gradient(model: MlpModel, x, y) -> np.ndarray:
    """Exact gradient of the cross-entropy J(f(x), y) with respect to x (row-wise for batches)."""
    xb, single = _as_batch(model, x)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (len(xb),))
    logits, cache = forward_batch(model, xb)
    g = softmax(logits)
    g[np.arange(len(xb)), y] -= 1.0
    _, _, gx = backward(model, cache, g)
    return gx[0] if single else gx


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    dropout_rate: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


class Adam:
    def __init__(self, model: MlpModel, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.params = [w.copy() for w in model.weights] + [b.copy() for b in model.biases]
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0
        self._n_layers = len(model.weights)
        self._template = model

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def model(self) -> MlpModel:
        n = self._n_layers
        return replace(
            self._template,
            weights=tuple(p.copy() for p in self.params[:n]),
            biases=tuple(p.copy() for p in self.params[n:]),
        )

    def current(self) -> MlpModel:
        """Model view over the live parameter arrays (no copy; do not keep across steps)."""
        n = self._n_layers
        view = object.__new__(MlpModel)  # skips validation, which is per-step overhead
        object.__setattr__(view, "layer_dims", self._template.layer_dims)
        object.__setattr__(view, "weights", tuple(self.params[:n]))
        object.__setattr__(view, "biases", tuple(self.params[n:]))
        object.__setattr__(view, "head", self._template.head)
        return view


def dropout_masks(model: MlpModel, rows: int, rate: float, rng: np.random.Generator):
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return [(rng.random((rows, d)) < keep) / keep for d in model.layer_dims[1:-1]]


def train(model: MlpModel, ds, cfg: TrainConfig, history: list | None = None) -> MlpModel:
    """Minibatch Adam on cross-entropy; returns a new model.

    ``ds`` is a FlowDataset or an ``(X, y)`` pair. If ``history`` is given it
    receives the mean training loss of every epoch (computed on the fly).
    """
    if isinstance(ds, tuple):
        x, y = ds
    else:
        x, y = ds.features, ds.labels
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if len(x) == 0:
        raise ValueError("cannot train on an empty dataset")
    if model.head != "softmax":
        raise ValueError("train() fits classifiers; use the diffusion trainer for linear heads")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x[idx], y[idx]
            net = opt.current()
            masks = dropout_masks(net, len(idx), cfg.dropout_rate, rng)
            logits, cache = forward_batch(net, xb, masks)
            logp = log_softmax(logits)
            total += float(-logp[np.arange(len(idx)), yb].sum())
            g = np.exp(logp)
            g[np.arange(len(idx)), yb] -= 1.0
            g /= len(idx)
            gw, gb, _ = backward(net, cache, g)
            opt.step(gw + gb)
        if history is not None:
            history.append(total / len(x))
    return opt.model()


def mc_dropout_predict(model: MlpModel, x, rate: float, n_passes: int, seed: int) -> np.ndarray:
    """Stochastic forward passes with inverted dropout on hidden units.

    Returns an array of shape (n_passes, 2) for one vector or
    (n_passes, rows, 2) for a batch.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if n_passes < 1:
        raise ValueError("n_passes must be at least 1")
    xb, single = _as_batch(model, x)
    rng = np.random.default_rng(seed)
    out = np.empty((n_passes, len(xb), model.output_dim))
    for p in range(n_passes):
        logits, _ = forward_batch(model, xb, dropout_masks(model, len(xb), rate, rng))
        out[p] = softmax(logits) if model.head == "softmax" else logits
    return out[:, 0] if single else out
