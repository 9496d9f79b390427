"""Natural adversarial examples: masked attack refinement inside the reverse diffusion loop.

A flow is forward-noised for ``t_fwd`` steps, then denoised from ``t_rev``
down to 1. After every denoising step the detector is checked; while it
still predicts the true label, up to ``refinement_iters`` AdvUpdate steps
perturb the Discrete features only, each budgeted around that step's freshly
denoised sample. The refined sample feeds the next reverse step. Clipping to
[0, 1] happens once, at emission.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffusion as dfn
from .attacks import AttackConfig, predicts_label, run_attack
from .detector import Detector
from .diffusion import DiffusionModel
from .flow_data import FlowDataset
from .taxonomy import FeatureCategorization

DEFAULT_BLOCK = 1024


@dataclass(frozen=True)
class InfusionConfig:
    attack: AttackConfig
    t_fwd: int = 30
    t_rev: int = 30
    # None means "use attack.iterations".
    refinement_iters: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.refinement_iters is None:
            object.__setattr__(self, "refinement_iters", self.attack.iterations)
        if self.refinement_iters < 0:
            raise ValueError("refinement_iters must be >= 0")
        if not 1 <= self.t_rev <= self.t_fwd:
            raise ValueError("need 1 <= t_rev <= t_fwd")

    @classmethod
    def for_categorization(cls, cat: FeatureCategorization, strategy: str = "PGD", **kwargs) -> "InfusionConfig":
        attack_overrides = {k: kwargs.pop(k) for k in ("epsilon", "alpha", "iterations") if k in kwargs}
        if not cat.discrete:
            raise ValueError("categorization has no Discrete features to perturb")
        attack = AttackConfig.preset(strategy, mask=tuple(sorted(cat.discrete)), **attack_overrides)
        return cls(attack=attack, **kwargs)

    @property
    def is_control(self) -> bool:
        return self.refinement_iters == 0

    def describe(self) -> dict:
        return {
            "attack": self.attack.describe(),
            "t_fwd": self.t_fwd,
            "t_rev": self.t_rev,
            "refinement_iters": self.refinement_iters,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class StepRecord:
    t: int
    adv_calls: int
    max_masked_deviation: float
    off_mask_exact: bool


@dataclass
class NaeResult:
    x_nae: np.ndarray
    orig: np.ndarray
    y: int
    fooled: bool
    adv_calls: int
    trace: list[StepRecord] | None = None


def _validate(det: Detector, dm: DiffusionModel, cat: FeatureCategorization, cfg: InfusionConfig, n: int) -> np.ndarray:
    if det.model.input_dim != n or dm.n_features != n:
        raise ValueError("detector, diffusion model and data disagree on the feature count")
    if cat.feature_names and tuple(cat.feature_names) != tuple(det.feature_names):
        raise ValueError("categorization schema does not match the detector")
    if cfg.t_fwd > dm.schedule.T:
        raise ValueError(f"t_fwd={cfg.t_fwd} exceeds the schedule length {dm.schedule.T}")
    if cfg.attack.mask is None or set(cfg.attack.mask) != set(cat.discrete):
        raise ValueError("attack mask must be exactly the Discrete feature set")
    return cfg.attack.mask_vector(n)


def _generate_block(x0, y, det, dm, cfg: InfusionConfig, mask, start_index: int, record: bool):
    k, n = x0.shape
    fwd, rev = dfn._block_noise(cfg.seed, start_index, k, n, cfg.t_fwd, cfg.t_rev)
    x = dfn.forward_chain(x0, dm.schedule, fwd)
    calls = np.zeros(k, dtype=np.int64)
    traces = [[] for _ in range(k)] if record else None

    for j, t in enumerate(range(cfg.t_rev, 0, -1)):
        x_tilde = dfn.reverse_step_with_noise(dm, x, t, rev[:, j, :])
        if cfg.refinement_iters > 0:
            worst = np.zeros(k)
            exact = np.ones(k, dtype=bool)

            def monitor(rows, anchor, current):
                dev = np.abs(current - anchor)[:, mask]
                worst[rows] = np.maximum(worst[rows], dev.max(axis=1) if dev.size else 0.0)
                exact[rows] &= (current[:, ~mask] == anchor[:, ~mask]).all(axis=1)

            step_cfg = replace(cfg.attack, iterations=cfg.refinement_iters)
            x_tilde, used = run_attack(det.model, x_tilde, y, step_cfg, clip=False, monitor=monitor if record else None)
            calls += used
            if record:
                for r in range(k):
                    traces[r].append(StepRecord(t, int(used[r]), float(worst[r]), bool(exact[r])))
        elif record:
            for r in range(k):
                traces[r].append(StepRecord(t, 0, 0.0, True))
        x = x_tilde

    x_nae = np.clip(x, 0.0, 1.0)
    fooled = predicts_label(det.model, x_nae) != y
    return x_nae, calls, fooled, traces


def generate_nae(
    x0,
    y: int,
    det: Detector,
    dm: DiffusionModel,
    cat: FeatureCategorization,
    cfg: InfusionConfig,
    index: int = 0,
    trace: bool = False,
) -> NaeResult:
    """Generate one natural adversarial example; ``index`` selects the per-row noise stream."""
    x0 = np.asarray(x0, dtype=float)
    mask = _validate(det, dm, cat, cfg, x0.size)
    x_nae, calls, fooled, traces = _generate_block(
        x0[None, :], np.array([y], dtype=np.int64), det, dm, cfg, mask, index, trace
    )
    return NaeResult(x_nae[0], x0.copy(), int(y), bool(fooled[0]), int(calls[0]), traces[0] if trace else None)


@dataclass
class BatchResult:
    dataset: FlowDataset
    fooled: np.ndarray
    adv_calls: np.ndarray
    summary: dict
    traces: list | None = field(default=None, repr=False)


def batch_generate(
    ds: FlowDataset,
    det: Detector,
    dm: DiffusionModel,
    cat: FeatureCategorization,
    cfg: InfusionConfig,
    trace: bool = False,
    block: int = DEFAULT_BLOCK,
) -> BatchResult:
    """Run ``generate_nae`` over every row (row i uses noise stream i), vectorized in blocks."""
    det.check_schema(ds)
    started = time.perf_counter()
    mask = _validate(det, dm, cat, cfg, ds.n_features)
    m = ds.n_rows
    out = np.empty((m, ds.n_features))
    calls = np.zeros(m, dtype=np.int64)
    fooled = np.zeros(m, dtype=bool)
    traces = [] if trace else None
    for start in range(0, m, block):
        stop = min(start + block, m)
        xb, cb, fb, tb = _generate_block(ds.features[start:stop], ds.labels[start:stop], det, dm, cfg, mask, start, trace)
        out[start:stop], calls[start:stop], fooled[start:stop] = xb, cb, fb
        if trace:
            traces.extend(tb)
    summary = {
        "mode": "nd",
        "n_rows": m,
        "fooled_rate": float(fooled.mean()) if m else None,
        "mean_adv_calls": float(calls.mean()) if m else None,
        "wall_time_s": time.perf_counter() - started,
        "control_run": cfg.is_control,
        **cfg.describe(),
    }
    return BatchResult(ds.with_features(out), fooled, calls, summary, traces)
