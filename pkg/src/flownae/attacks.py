"""Masked, L-infinity budgeted gradient attacks: FGSM, PGD and a conjugate-gradient variant.

All step functions work on a single vector or on a (rows, n) batch. Only
coordinates in the mask move; the rest stay bit-identical to the anchor.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .detector import Detector, predict_from_proba
from .flow_data import FlowDataset

STRATEGIES = ("FGSM", "PGD", "ACG")

# Written into every output produced with ACG so results are not mistaken for the full method.
ACG_NOTE = (
    "ACG here = sign of a Hestenes-Stiefel conjugate direction with fixed step alpha "
    "and L-inf projection; the original adaptive step-size schedule is not implemented"
)

# Table-style defaults: eps, alpha, iterations.
PRESETS = {
    "FGSM": dict(epsilon=0.3, alpha=0.3, iterations=1),
    "PGD": dict(epsilon=0.3, alpha=0.01, iterations=40),
    "ACG": dict(epsilon=0.3, alpha=0.1, iterations=100),
}


@dataclass(frozen=True)
class AttackConfig:
    strategy: str = "PGD"
    epsilon: float = 0.3
    alpha: float = 0.01
    iterations: int = 40
    # Perturbable feature indices; None means every feature.
    mask: tuple[int, ...] | None = None

    def __post_init__(self):
        strategy = self.strategy.upper()
        object.__setattr__(self, "strategy", strategy)
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.epsilon < 0 or (strategy != "FGSM" and self.epsilon == 0):
            raise ValueError("epsilon must be positive (FGSM also accepts 0)")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if strategy != "FGSM" and self.alpha > self.epsilon:
            raise ValueError("alpha must not exceed epsilon")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.mask is not None:
            mask = tuple(sorted({int(i) for i in self.mask}))
            if not mask:
                raise ValueError("mask must name at least one feature")
            object.__setattr__(self, "mask", mask)

    @classmethod
    def preset(cls, strategy: str, **overrides) -> "AttackConfig":
        params = dict(PRESETS[strategy.upper()])
        params.update(overrides)
        return cls(strategy=strategy, **params)

    def mask_vector(self, n: int) -> np.ndarray:
        vec = np.zeros(n, dtype=bool)
        if self.mask is None:
            vec[:] = True
        else:
            if self.mask[-1] >= n:
                raise ValueError("mask index beyond the feature count")
            vec[list(self.mask)] = True
        return vec

    def describe(self) -> dict:
        doc = {
            "strategy": self.strategy,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "iterations": self.iterations,
            "mask": None if self.mask is None else list(self.mask),
        }
        if self.strategy == "ACG":
            doc["note"] = ACG_NOTE
        return doc


@dataclass(frozen=True)
class AttackState:
    anchor: np.ndarray
    current: np.ndarray
    prev_gradient: np.ndarray | None = None
    prev_direction: np.ndarray | None = None
    iteration: int = 0

    @classmethod
    def start(cls, x) -> "AttackState":
        x = np.array(x, dtype=float)
        return cls(anchor=x, current=x.copy())

    def take(self, rows) -> "AttackState":
        pick = lambda a: None if a is None else a[rows]
        return AttackState(
            self.anchor[rows], self.current[rows], pick(self.prev_gradient), pick(self.prev_direction), self.iteration
        )


def _as_mask(mask, n: int) -> np.ndarray:
    if isinstance(mask, np.ndarray) and mask.dtype == bool:
        if mask.shape != (n,):
            raise ValueError("mask length does not match the feature count")
        return mask
    vec = np.zeros(n, dtype=bool)
    vec[list(mask)] = True
    return vec


def project(candidate, anchor, epsilon: float, mask, clip: bool = True) -> np.ndarray:
    """Clamp masked coordinates into [anchor - eps, anchor + eps], then into [0, 1].

    Off-mask coordinates are replaced by the anchor's values.
    """
    candidate = np.asarray(candidate, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    m = _as_mask(mask, candidate.shape[-1])
    out = np.clip(candidate, anchor - epsilon, anchor + epsilon)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return np.where(m, out, anchor)


def fgsm_step(x, grad, epsilon: float, mask, clip: bool = True) -> np.ndarray:
    """x + eps * sign(grad) on masked coordinates, clipped to [0, 1]; sign(0) = 0."""
    x = np.asarray(x, dtype=float)
    m = _as_mask(mask, x.shape[-1])
    moved = x + epsilon * np.sign(grad)
    if clip:
        moved = np.clip(moved, 0.0, 1.0)
    return np.where(m, moved, x)


def pgd_step(state: AttackState, grad, alpha: float, epsilon: float, mask, clip: bool = True) -> AttackState:
    m = _as_mask(mask, state.current.shape[-1])
    candidate = state.current + alpha * np.sign(grad) * m
    current = project(candidate, state.anchor, epsilon, m, clip)
    return replace(state, current=current, iteration=state.iteration + 1)


def _rowdot(a, b):
    return np.sum(a * b, axis=-1)


def acg_step(state: AttackState, grad, alpha: float, epsilon: float, mask, clip: bool = True) -> AttackState:
    """Ascend along sign(s) with s = g + beta * s_prev, beta from Hestenes-Stiefel (clamped at 0)."""
    m = _as_mask(mask, state.current.shape[-1])
    g = np.asarray(grad, dtype=float) * m
    if state.prev_gradient is None or state.prev_direction is None:
        beta = np.zeros(g.shape[:-1])
        direction = g
    else:
        dg = g - state.prev_gradient
        num = _rowdot(g, dg)
        den = _rowdot(state.prev_direction, dg)
        ok = np.abs(den) >= 1e-12
        beta = np.where(ok, num / np.where(ok, den, 1.0), 0.0)
        beta = np.maximum(beta, 0.0)
        direction = g + np.asarray(beta)[..., None] * state.prev_direction
    candidate = state.current + alpha * np.sign(direction) * m
    current = project(candidate, state.anchor, epsilon, m, clip)
    return AttackState(state.anchor, current, g, direction, state.iteration + 1)


def adv_update(state: AttackState, det, y, cfg: AttackConfig, clip: bool = True) -> AttackState:
    """One AdvUpdate: gradient of the detector loss at ``state.current``, then the configured step."""
    model = det.model if isinstance(det, Detector) else det
    n = state.current.shape[-1]
    if model.input_dim != n:
        raise ValueError(f"state has {n} features, detector expects {model.input_dim}")
    m = cfg.mask_vector(n)
    grad = nn.input_gradient(model, state.current, y)
    if cfg.strategy == "FGSM":
        moved = fgsm_step(state.current, grad, cfg.epsilon, m, clip)
        current = project(moved, state.anchor, cfg.epsilon, m, clip)
        return replace(state, current=current, iteration=state.iteration + 1)
    if cfg.strategy == "PGD":
        return pgd_step(state, grad, cfg.alpha, cfg.epsilon, m, clip)
    return acg_step(state, grad, cfg.alpha, cfg.epsilon, m, clip)


def predicts_label(model: nn.MlpModel, x: np.ndarray) -> np.ndarray:
    return predict_from_proba(nn.predict_proba(model, x))


@dataclass
class AttackResult:
    dataset: FlowDataset
    success: np.ndarray
    iterations: np.ndarray
    config: dict = field(default_factory=dict)

    @property
    def success_rate(self) -> float:
        return float(self.success.mean()) if self.success.size else float("nan")


def run_attack(model: nn.MlpModel, x: np.ndarray, y: np.ndarray, cfg: AttackConfig, clip: bool = True, monitor=None):
    """Batched per-row attack with early exit once a row is misclassified.

    ``monitor(rows, anchor, current)`` is called after every update with the
    rows that moved. Returns (adversarial rows, iterations used per row).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    state = AttackState.start(x)
    used = np.zeros(len(x), dtype=np.int64)
    if len(x) == 0:
        return state.current, used
    active = predicts_label(model, x) == y
    prev_g = np.zeros_like(x)
    prev_d = np.zeros_like(x)
    has_prev = np.zeros(len(x), dtype=bool)
    for _ in range(cfg.iterations):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        sub = AttackState(
            state.anchor[rows],
            state.current[rows],
            prev_g[rows] if has_prev[rows].all() else None,
            prev_d[rows] if has_prev[rows].all() else None,
        )
        new = adv_update(sub, model, y[rows], cfg, clip)
        state.current[rows] = new.current
        if new.prev_gradient is not None:
            prev_g[rows] = new.prev_gradient
            prev_d[rows] = new.prev_direction
            has_prev[rows] = True
        used[rows] += 1
        if monitor is not None:
            monitor(rows, sub.anchor, new.current)
        active[rows] = predicts_label(model, new.current) == y[rows]
    return state.current, used


def baseline_attack(det: Detector, ds: FlowDataset, cfg: AttackConfig) -> AttackResult:
    """Unconstrained-feature baseline: every feature is perturbable, clipped to [0, 1] each step."""
    det.check_schema(ds)
    cfg = replace(cfg, mask=None)
    adv, used = run_attack(det.model, ds.features, ds.labels, cfg)
    success = predicts_label(det.model, adv) != ds.labels if len(adv) else np.zeros(0, dtype=bool)
    return AttackResult(ds.with_features(adv), success, used, {"mode": "baseline", **cfg.describe()})
