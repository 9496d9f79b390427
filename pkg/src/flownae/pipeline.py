"""End-to-end stages shared by the CLI commands and the desk reproduction run."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import artifact as ae
from . import diffusion as dfn
from . import infusion, metrics, taxonomy
from .attacks import baseline_attack
from .config import ExperimentConfig, stage_seed
from .detector import Detector, accuracy, train_detector
from .diffusion import DiffusionModel
from .flow_data import FlowDataset, MinMaxTable, holdout, load_csv, normalize, split, synth_generate
from .taxonomy import FeatureCategorization

DESK_STRATEGIES = ("FGSM", "PGD")


@dataclass
class PreparedData:
    data: FlowDataset
    pool: FlowDataset
    test: FlowDataset
    d1: FlowDataset
    d2: FlowDataset
    table: MinMaxTable | None = None


def load_data(cfg: ExperimentConfig) -> tuple[FlowDataset, MinMaxTable | None]:
    """The normalized dataset named by the config (CSV or synthetic)."""
    if cfg.data_csv is None:
        return synth_generate(cfg.synth_spec(), stage_seed(cfg.seed, "data")), None
    return normalize(load_csv(cfg.data_csv, cfg.column_spec()))


def prepare(cfg: ExperimentConfig) -> PreparedData:
    data, table = load_data(cfg)
    pool, test = holdout(data, cfg.holdout_fraction, stage_seed(cfg.seed, "holdout"))
    d1, d2 = split(pool, stage_seed(cfg.seed, "split"))
    return PreparedData(data, pool, test, d1, d2, table)


def categorize(cfg: ExperimentConfig, data: FlowDataset) -> FeatureCategorization:
    if cfg.discrete_override is not None:
        return taxonomy.override(data.feature_names, cfg.discrete_override)
    return taxonomy.categorize(data)


def train_models(cfg: ExperimentConfig, d1: FlowDataset, d2: FlowDataset) -> tuple[Detector, DiffusionModel]:
    det = train_detector(d1, cfg.detector_hidden, cfg.train_config(stage_seed(cfg.seed, "detector")))
    dm = dfn.train_diffusion(
        d2,
        hidden=cfg.diffusion_hidden,
        schedule=dfn.linear_schedule(cfg.diffusion_T),
        iters=cfg.diffusion_iters,
        lr=cfg.diffusion_lr,
        seed=stage_seed(cfg.seed, "diffusion"),
        batch_size=cfg.diffusion_batch_size,
        embedding_dim=cfg.diffusion_embedding_dim,
    )
    return det, dm


def attack_rows(cfg: ExperimentConfig, test: FlowDataset) -> FlowDataset:
    rows = np.flatnonzero(test.labels == 1) if cfg.attack_rows == "malicious" else np.arange(test.n_rows)
    if cfg.eval_rows is not None:
        rows = rows[: cfg.eval_rows]
    return test.subset(rows)


@dataclass
class AttackOutput:
    dataset: FlowDataset
    # Per-row columns exported next to the features.
    columns: dict
    summary: dict
    traces: list | None = field(default=None, repr=False)


def run_mode(
    cfg: ExperimentConfig,
    mode: str,
    strategy: str,
    det: Detector,
    source: FlowDataset,
    dm: DiffusionModel | None = None,
    cat: FeatureCategorization | None = None,
    trace: bool = False,
) -> AttackOutput:
    """Baseline attack on every feature, or diffusion-infused attack on the Discrete set."""
    if mode == "baseline":
        res = baseline_attack(det, source, cfg.attack_config(strategy))
        summary = {
            "mode": "baseline",
            "n_rows": source.n_rows,
            "success_rate": float(res.success.mean()) if source.n_rows else None,
            "mean_iterations": float(res.iterations.mean()) if source.n_rows else None,
            **res.config,
        }
        cols = {"orig_label": source.labels, "attack_success": res.success}
        return AttackOutput(res.dataset, cols, summary)
    if mode != "nd":
        raise ValueError(f"unknown attack mode {mode!r}")
    if dm is None or cat is None:
        raise ValueError("nd mode needs a diffusion model and a categorization")
    icfg = infusion.InfusionConfig.for_categorization(
        cat,
        strategy,
        t_fwd=cfg.t_fwd,
        t_rev=cfg.t_rev,
        refinement_iters=cfg.refinement_iters,
        seed=stage_seed(cfg.seed, "infusion"),
        **cfg.attack_overrides(),
    )
    res = infusion.batch_generate(source, det, dm, cat, icfg, trace=trace)
    summary = dict(res.summary)
    summary["categorization_source"] = cat.source
    cols = {"orig_label": source.labels, "fooled": res.fooled, "adv_calls": res.adv_calls}
    return AttackOutput(res.dataset, cols, summary, res.traces)


@dataclass
class Evaluation:
    report: metrics.EvaluationReport
    pca: metrics.PcaProjection
    corr_diff: np.ndarray
    roc: ae.RocCurve | None


def evaluate(
    cfg: ExperimentConfig, det: Detector, d1: FlowDataset, clean: FlowDataset, adv: FlowDataset
) -> Evaluation:
    """Accuracy, purification, ASR, detector AUC and fidelity for one clean/adversarial pair.

    ``clean`` and ``adv`` are row-aligned. The Artifact-style detector is fit
    on the first half of the rows (clean half vs adversarial half) and scored
    on the second half; the purification threshold comes from the clean fit half.
    """
    det.check_schema(clean)
    det.check_schema(adv)
    if clean.n_rows != adv.n_rows or clean.n_rows < 4:
        raise ValueError("clean and adversarial sets must be row-aligned with at least 4 rows")
    seed = stage_seed(cfg.seed, "artifact")
    acc_before = accuracy(det, clean).accuracy
    acc_after = accuracy(det, adv).accuracy

    half = clean.n_rows // 2
    kde = ae.fit_kde(det, d1)
    art = ae.fit_artifact(det, kde, clean.features[:half], adv.features[:half], cfg.ae_dropout, cfg.ae_passes, seed)
    s_clean_fit = art.score(clean.features[:half])
    s_clean = art.score(clean.features[half:])
    s_adv = art.score(adv.features[half:])
    roc = ae.auc_roc(np.r_[s_clean, s_adv], np.r_[np.zeros(len(s_clean)), np.ones(len(s_adv))])
    threshold = metrics.threshold_at_fpr(s_clean_fit, cfg.purify_fpr)
    acc_purified = metrics.purify_compose(det, art, threshold, adv.subset(np.arange(half, adv.n_rows)))

    bandwidth = metrics.median_bandwidth(np.vstack([adv.features, clean.features]))
    report = metrics.EvaluationReport(
        acc_before=acc_before,
        acc_after=acc_after,
        acc_purified=acc_purified,
        asr=None,
        auc_roc=roc.auc,
        mmd2=metrics.mmd2_biased(adv.features, clean.features, bandwidth),
        wasserstein=metrics.wasserstein1_avg(adv.features, clean.features),
        meta={
            "n_rows": clean.n_rows,
            "mmd_bandwidth": bandwidth,
            "purify_threshold": threshold,
            "purify_fpr": cfg.purify_fpr,
            "ae_fit_rows": half,
        },
    )
    return Evaluation(
        report,
        metrics.pca_density_export(clean.features, adv.features),
        metrics.corr_diff(clean.features, adv.features),
        roc,
    )


@dataclass
class DeskRun:
    cfg: ExperimentConfig
    prepared: PreparedData
    cat: FeatureCategorization
    det: Detector
    dm: DiffusionModel
    source: FlowDataset
    attacks: dict
    evaluations: dict
    report: dict


def _finite(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def desk_run(cfg: ExperimentConfig, trace: bool = False, strategies=DESK_STRATEGIES) -> DeskRun:
    """Full pipeline: data, categorization, both models, baseline and ND attacks, evaluation.

    The returned ``report`` is deterministic given the config (no timings).
    """
    prep = prepare(cfg)
    cat = categorize(cfg, prep.data)
    det, dm = train_models(cfg, prep.d1, prep.d2)
    clean_acc = accuracy(det, prep.test).accuracy
    source = attack_rows(cfg, prep.test)

    attacks, evals, runs = {}, {}, {}
    for strategy in strategies:
        runs[strategy] = {}
        for mode in ("baseline", "nd"):
            out = run_mode(cfg, mode, strategy, det, source, dm, cat, trace=trace and mode == "nd")
            ev = evaluate(cfg, det, prep.d1, source, out.dataset)
            attacks[strategy, mode] = out
            evals[strategy, mode] = ev
            rate_key = "success_rate" if mode == "baseline" else "fooled_rate"
            runs[strategy][mode] = {
                **ev.report.to_json(),
                rate_key: out.summary[rate_key],
            }

    control = run_mode(cfg.replace(refinement_iters=0), "nd", "PGD", det, source, dm, cat)
    control_acc = accuracy(det, control.dataset).accuracy

    criteria = {}
    if set(strategies) >= set(DESK_STRATEGIES):
        drops = {s: {m: clean_acc - runs[s][m]["acc_after"] for m in ("baseline", "nd")} for s in DESK_STRATEGIES}
        criteria["attack_efficacy"] = bool(
            clean_acc >= 0.95
            and all(drops[s]["baseline"] >= 0.30 and drops[s]["nd"] < drops[s]["baseline"] for s in DESK_STRATEGIES)
        )
        criteria["stealth"] = bool(
            all(
                runs[s]["nd"][k] < runs[s]["baseline"][k]
                for s in DESK_STRATEGIES
                for k in ("mmd2", "wasserstein")
            )
        )
        criteria["detector_evasion"] = bool(runs["FGSM"]["baseline"]["auc_roc"] - runs["FGSM"]["nd"]["auc_roc"] >= 0.1)

    report = {
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "data": prep.data.fingerprint(),
        "categorization": cat.to_json(),
        "clean_accuracy": clean_acc,
        "attack_rows": {"mode": cfg.attack_rows, "n_rows": source.n_rows},
        "control_accuracy": control_acc,
        "runs": runs,
        "criteria": criteria,
    }
    report["categorization"]["cut_height"] = _finite(report["categorization"]["cut_height"])
    return DeskRun(cfg, prep, cat, det, dm, source, attacks, evals, report)
