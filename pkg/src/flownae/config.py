"""Flat experiment configuration and per-stage seed derivation."""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import nn
from .attacks import PRESETS, STRATEGIES, AttackConfig
from .flow_data import ColumnSpec, DataError, SynthSpec


class ConfigError(ValueError):
    """Invalid or unreadable experiment configuration."""


ROW_MODES = ("malicious", "all")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/desk"

    # Data: a CSV when data_csv is set, otherwise the synthetic generator.
    data_csv: str | None = None
    label_column: str = "Label"
    drop_columns: tuple[str, ...] = ()
    positive_labels: tuple[str, ...] = ()
    negative_labels: tuple[str, ...] = ()
    synth_n_flows: int = 4000
    synth_groups: tuple[int, ...] = (3, 3)
    synth_n_independent: int = 4
    synth_class_separation: float = 5.0
    synth_noise_sigma: float = 0.01
    synth_independent_weight: float = 0.9
    holdout_fraction: float = 0.2

    detector_hidden: tuple[int, ...] = (50,)
    detector_lr: float = 0.001
    detector_epochs: int = 30
    detector_batch_size: int = 128

    diffusion_hidden: tuple[int, ...] = (128, 128)
    diffusion_T: int = 100
    diffusion_iters: int = 12000
    diffusion_lr: float = 0.002
    diffusion_batch_size: int = 256
    diffusion_embedding_dim: int = 16

    # Attack: None falls back to the strategy preset.
    attack_strategy: str = "PGD"
    attack_epsilon: float | None = None
    attack_alpha: float | None = None
    attack_iterations: int | None = None

    t_fwd: int = 30
    t_rev: int = 30
    refinement_iters: int | None = None

    # Which held-out rows get attacked, and how many (None = all of them).
    attack_rows: str = "malicious"
    eval_rows: int | None = None

    ae_dropout: float = 0.5
    ae_passes: int = 50
    purify_fpr: float = 0.1
    discrete_override: tuple[str, ...] | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        if self.attack_strategy not in STRATEGIES:
            raise ConfigError(f"attack_strategy must be one of {STRATEGIES}")
        if self.attack_rows not in ROW_MODES:
            raise ConfigError(f"attack_rows must be one of {ROW_MODES}")
        if self.eval_rows is not None and self.eval_rows < 1:
            raise ConfigError("eval_rows must be positive or null")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in (0, 1)")
        if not 1 <= self.t_rev <= self.t_fwd <= self.diffusion_T:
            raise ConfigError("need 1 <= t_rev <= t_fwd <= diffusion_T")
        if not 0.0 < self.purify_fpr < 1.0:
            raise ConfigError("purify_fpr must be in (0, 1)")
        if not 0.0 < self.ae_dropout < 1.0 or self.ae_passes < 2:
            raise ConfigError("ae_dropout must be in (0, 1) and ae_passes >= 2")
        if self.diffusion_iters < 0 or self.diffusion_T < 1:
            raise ConfigError("diffusion_T must be >= 1 and diffusion_iters >= 0")
        if self.data_csv is not None and not Path(self.data_csv).is_file():
            raise ConfigError(f"data_csv does not exist: {self.data_csv}")
        # Surface sub-config errors at load time rather than mid-pipeline.
        try:
            if self.data_csv is None:
                self.synth_spec()
            else:
                self.column_spec()
            self.train_config(0)
            self.attack_config(self.attack_strategy)
        except (DataError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def config_hash(self) -> str:
        """Hash of every setting except the output directory."""
        doc = self.to_dict()
        doc.pop("out")
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def synth_spec(self) -> SynthSpec:
        return SynthSpec(
            n_flows=self.synth_n_flows,
            groups=tuple(self.synth_groups),
            n_independent=self.synth_n_independent,
            class_separation=self.synth_class_separation,
            noise_sigma=self.synth_noise_sigma,
            independent_weight=self.synth_independent_weight,
        )

    def column_spec(self) -> ColumnSpec:
        return ColumnSpec(self.label_column, self.drop_columns, self.positive_labels, self.negative_labels)

    def train_config(self, seed: int) -> nn.TrainConfig:
        return nn.TrainConfig(
            learning_rate=self.detector_lr, epochs=self.detector_epochs, batch_size=self.detector_batch_size, seed=seed
        )

    def attack_overrides(self) -> dict:
        pairs = (("epsilon", self.attack_epsilon), ("alpha", self.attack_alpha), ("iterations", self.attack_iterations))
        return {k: v for k, v in pairs if v is not None}

    def attack_config(self, strategy: str, mask=None) -> AttackConfig:
        if strategy not in PRESETS:
            raise ConfigError(f"unknown strategy {strategy!r}")
        return AttackConfig.preset(strategy, mask=mask, **self.attack_overrides())

    def replace(self, **changes) -> "ExperimentConfig":
        doc = self.to_dict()
        doc.update(changes)
        return ExperimentConfig.from_dict(doc)


def stage_seed(master: int, stage: str) -> int:
    """Fixed split of the master seed: master + crc32(stage name), mod 2**32."""
    return (int(master) + zlib.crc32(stage.encode("utf-8"))) % 2**32
