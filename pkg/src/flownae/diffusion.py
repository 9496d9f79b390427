"""Gaussian DDPM over normalized flow vectors.

The denoiser is an MLP that sees ``[x_t, embed(t)]`` and predicts the noise
added by the forward process. Timesteps run 1..T; index 0 of the schedule
arrays corresponds to t = 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import nn

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=float).reshape(-1)
        if betas.size < 1:
            raise ValueError("schedule needs at least one step")
        if not ((betas > 0.0) & (betas < 1.0)).all():
            raise ValueError("every beta must lie strictly between 0 and 1")
        alpha_bars = np.cumprod(1.0 - betas)
        if not (np.diff(alpha_bars) < 0).all():
            raise ValueError("cumulative alpha must be strictly decreasing")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @property
    def T(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to t; alpha_bar(0) is 1."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_sigma(self, t: int) -> float:
        return math.sqrt(self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t)))


def linear_schedule(T: int = 100, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """Linear betas. Defaults rescale the usual 1e-4..0.02 (defined for T=1000) by 1000/T."""
    if T < 1:
        raise ValueError("T must be at least 1")
    scale = 1000.0 / T
    lo = 1e-4 * scale if beta_start is None else beta_start
    hi = min(0.02 * scale, 0.999) if beta_end is None else beta_end
    return NoiseSchedule(np.linspace(lo, hi, T))


def timestep_embedding(t, dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding, one row per timestep."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


@dataclass(frozen=True)
class DiffusionModel:
    schedule: NoiseSchedule
    denoiser: nn.MlpModel
    embedding_dim: int = 16

    def __post_init__(self):
        n = self.denoiser.output_dim
        if self.denoiser.input_dim != n + self.embedding_dim:
            raise ValueError("denoiser input must be data dim + embedding dim")
        if self.denoiser.head != "linear":
            raise ValueError("denoiser needs a linear head")

    @property
    def n_features(self) -> int:
        return self.denoiser.output_dim

    def to_json(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "schedule": {"T": self.schedule.T, "betas": self.schedule.betas.tolist()},
            "embedding_dim": self.embedding_dim,
            "denoiser": self.denoiser.to_json(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "DiffusionModel":
        if doc.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported diffusion checkpoint version {doc.get('version')!r}")
        betas = np.asarray(doc["schedule"]["betas"], dtype=float)
        if betas.size != int(doc["schedule"]["T"]):
            raise ValueError("schedule T does not match the number of betas")
        return cls(NoiseSchedule(betas), nn.MlpModel.from_json(doc["denoiser"]), int(doc["embedding_dim"]))

    def save(self, path, **extra) -> None:
        doc = self.to_json()
        doc.update(extra)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def denoiser_input(x_t: np.ndarray, t, embedding_dim: int) -> np.ndarray:
    x_t = np.atleast_2d(x_t)
    t = np.broadcast_to(np.asarray(t), (len(x_t),))
    return np.concatenate([x_t, timestep_embedding(t, embedding_dim)], axis=1)


def predict_noise(dm: DiffusionModel, x_t, t) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=float)
    out, _ = nn.forward_batch(dm.denoiser, denoiser_input(x_t, t, dm.embedding_dim))
    return out[0] if x_t.ndim == 1 else out


def forward_chain(x0: np.ndarray, schedule: NoiseSchedule, noise: np.ndarray) -> np.ndarray:
    """Apply x_t = sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) z_t for t = 1..len(noise).

    ``noise`` has the step axis second-to-last: (steps, n) for one vector or
    (rows, steps, n) for a batch.
    """
    x = np.array(x0, dtype=float)
    for t in range(1, noise.shape[-2] + 1):
        b = schedule.beta(t)
        x = math.sqrt(1.0 - b) * x + math.sqrt(b) * noise[..., t - 1, :]
    return x


def forward_diffuse_chain(x0, schedule: NoiseSchedule, seed: int, steps: int | None = None) -> np.ndarray:
    """Iterate the forward recurrence for ``steps`` (default T) steps with fresh Gaussian noise."""
    x0 = np.asarray(x0, dtype=float)
    steps = schedule.T if steps is None else steps
    if not 0 <= steps <= schedule.T:
        raise ValueError("steps must be within the schedule")
    rng = np.random.default_rng(seed)
    if x0.ndim == 1:
        noise = rng.standard_normal((steps, x0.size))
    else:
        noise = rng.standard_normal((x0.shape[0], steps, x0.shape[1]))
    return forward_chain(x0, schedule, noise)


def q_sample(x0: np.ndarray, t, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal sqrt(abar_t) x0 + sqrt(1 - abar_t) noise (t may be per-row)."""
    ab = schedule.alpha_bars[np.asarray(t) - 1]
    ab = np.asarray(ab)[..., None] if np.ndim(ab) else ab
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def train_diffusion(
    d2,
    hidden=(128, 128),
    schedule: NoiseSchedule | None = None,
    iters: int = 4000,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 256,
    embedding_dim: int = 16,
    history: list | None = None,
) -> DiffusionModel:
    """Fit the noise predictor with the simplified DDPM objective (MSE on epsilon)."""
    x = np.asarray(getattr(d2, "features", d2), dtype=float)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("cannot train diffusion on an empty dataset")
    schedule = schedule or linear_schedule()
    n = x.shape[1]
    rng = np.random.default_rng(seed)
    denoiser = nn.init((n + embedding_dim, *hidden, n), int(rng.integers(2**31)), head="linear")
    if iters == 0:
        return DiffusionModel(schedule, denoiser, embedding_dim)
    opt = nn.Adam(denoiser, lr)
    emb_table = timestep_embedding(np.arange(1, schedule.T + 1), embedding_dim)
    sqrt_ab = np.sqrt(schedule.alpha_bars)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bars)
    for _ in range(iters):
        idx = rng.integers(len(x), size=batch_size)
        t = rng.integers(1, schedule.T + 1, size=batch_size)
        eps = rng.standard_normal((batch_size, n))
        x_t = sqrt_ab[t - 1, None] * x[idx] + sqrt_1mab[t - 1, None] * eps
        inp = np.concatenate([x_t, emb_table[t - 1]], axis=1)
        net = opt.current()
        pred, cache = nn.forward_batch(net, inp)
        diff = pred - eps
        if history is not None:
            history.append(float(np.mean(diff * diff)))
        gw, gb, _ = nn.backward(net, cache, 2.0 * diff / diff.size)
        opt.step(gw + gb)
    return DiffusionModel(schedule, opt.model(), embedding_dim)


def reverse_mean(dm: DiffusionModel, x_t: np.ndarray, t: int) -> np.ndarray:
    s = dm.schedule
    eps_hat = predict_noise(dm, x_t, t)
    return (x_t - (s.beta(t) / math.sqrt(1.0 - s.alpha_bar(t))) * eps_hat) / math.sqrt(1.0 - s.beta(t))


def reverse_step_with_noise(dm: DiffusionModel, x_t: np.ndarray, t: int, z: np.ndarray) -> np.ndarray:
    if not 1 <= t <= dm.schedule.T:
        raise ValueError(f"timestep {t} outside 1..{dm.schedule.T}")
    mean = reverse_mean(dm, x_t, t)
    if t == 1:
        return mean
    return mean + dm.schedule.posterior_sigma(t) * z


def reverse_step(dm: DiffusionModel, x_t, t: int, seed: int) -> np.ndarray:
    """One ancestral step x_t -> x_{t-1}; no noise is added at t = 1."""
    x_t = np.asarray(x_t, dtype=float)
    z = np.random.default_rng(seed).standard_normal(x_t.shape)
    return reverse_step_with_noise(dm, x_t, t, z)


def row_noise(seed: int, index: int, n: int, fwd_steps: int, rev_steps: int):
    """Per-row forward and reverse noise draws, keyed on (seed, row index)."""
    rng = np.random.default_rng((seed, index))
    return rng.standard_normal((fwd_steps, n)), rng.standard_normal((rev_steps, n))


def _block_noise(seed, start, count, n, fwd_steps, rev_steps):
    pairs = [row_noise(seed, start + i, n, fwd_steps, rev_steps) for i in range(count)]
    fwd = np.stack([p[0] for p in pairs]) if count else np.zeros((0, fwd_steps, n))
    rev = np.stack([p[1] for p in pairs]) if count else np.zeros((0, rev_steps, n))
    return fwd, rev


def sample(dm: DiffusionModel, count: int, seed: int, block: int = 512) -> np.ndarray:
    """``count`` independent reverse chains from N(0, I), clipped to [0, 1] at emission.

    Chain i draws from its own generator keyed on (seed, i).
    """
    n, T = dm.n_features, dm.schedule.T
    out = np.empty((count, n))
    for start in range(0, count, block):
        k = min(block, count - start)
        start_noise, rev = _block_noise(seed, start, k, n, 1, T)
        x = start_noise[:, 0, :]
        for j, t in enumerate(range(T, 0, -1)):
            x = reverse_step_with_noise(dm, x, t, rev[:, j, :])
        out[start : start + k] = np.clip(x, 0.0, 1.0)
    return out


def reconstruct(
    dm: DiffusionModel, x0, t_fwd: int, t_rev: int, seed: int, start_index: int = 0, block: int = 1024
) -> np.ndarray:
    """Forward-noise each row for t_fwd steps, then denoise from t_rev down to 1 (no perturbation).

    Uses the same per-row noise streams and blocking as adversarial infusion, so
    it is the exact unperturbed control for a given seed.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if not 1 <= t_rev <= t_fwd <= dm.schedule.T:
        raise ValueError("need 1 <= t_rev <= t_fwd <= T")
    out = np.empty_like(x0)
    for start in range(0, len(x0), block):
        chunk = x0[start : start + block]
        fwd, rev = _block_noise(seed, start_index + start, len(chunk), x0.shape[1], t_fwd, t_rev)
        x = forward_chain(chunk, dm.schedule, fwd)
        for j, t in enumerate(range(t_rev, 0, -1)):
            x = reverse_step_with_noise(dm, x, t, rev[:, j, :])
        out[start : start + len(chunk)] = np.clip(x, 0.0, 1.0)
    return out
