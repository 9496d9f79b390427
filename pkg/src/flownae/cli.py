"""Command-line entry point: categorize, train, attack, evaluate, reproduce-desk.

Every command reads one flat JSON config, derives stage seeds from the master
seed, and writes its outputs plus a manifest under the config's ``out``
directory. Exit codes: 0 success, 2 config error, 3 schema drift, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, pipeline
from .config import ConfigError, ExperimentConfig, stage_seed
from .detector import Detector, SchemaMismatch
from .diffusion import DiffusionModel
from .flow_data import load_normalized, save_csv
from .metrics import matrix_to_csv
from .taxonomy import FeatureCategorization, override

log = logging.getLogger("flownae")

EXIT_OK, EXIT_CONFIG, EXIT_SCHEMA, EXIT_RUNTIME = 0, 2, 3, 4
STAGES = ("data", "holdout", "split", "detector", "diffusion", "infusion", "artifact")
EXTRA_COLUMNS = ("orig_label", "attack_success", "fooled", "adv_calls")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, outputs, inputs=(), **extra) -> Path:
    """Provenance record: config and its hash, seeds, library versions, file digests."""
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "stage_seeds": {s: stage_seed(cfg.seed, s) for s in STAGES},
        "versions": {
            "flownae": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
        "outputs": {Path(p).name: _sha256(Path(p)) for p in outputs},
        **extra,
    }
    path = out / f"manifest-{command}.json"
    _write_json(path, doc)
    return path


def _paths(out: Path) -> dict:
    return {
        "categorization": out / "categorization.json",
        "dendrogram": out / "dendrogram.csv",
        "detector": out / "detector.json",
        "diffusion": out / "diffusion.json",
        "d1": out / "splits" / "d1.csv",
        "d2": out / "splits" / "d2.csv",
        "test": out / "splits" / "test.csv",
        "minmax": out / "minmax.csv",
    }


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"missing checkpoint {path} (run `{hint}` first)")
    return path


def _has_column(path: Path, name: str) -> bool:
    with open(path, encoding="utf-8") as fh:
        return name in fh.readline().strip().split(",")


def cmd_categorize(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data, _ = pipeline.load_data(cfg)
    cat = pipeline.categorize(cfg, data)
    p = _paths(out)
    cat.save(p["categorization"])
    written = [p["categorization"]]
    if cat.dendrogram is not None:
        cat.dendrogram.to_csv(p["dendrogram"])
        written.append(p["dendrogram"])
    write_manifest(out, "categorize", cfg, written, data=data.fingerprint(), discrete_override=cfg.discrete_override)
    log.info("discrete features: %s", ", ".join(cat.to_json()["discrete"]) or "(none)")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    p = _paths(out)
    p["d1"].parent.mkdir(parents=True, exist_ok=True)
    prep = pipeline.prepare(cfg)
    det, dm = pipeline.train_models(cfg, prep.d1, prep.d2)
    det.save(p["detector"])
    dm.save(p["diffusion"], metadata={"feature_names": list(prep.d2.feature_names)})
    for name in ("d1", "d2", "test"):
        save_csv(getattr(prep, name), p[name])
    written = [p["detector"], p["diffusion"], p["d1"], p["d2"], p["test"]]
    if prep.table is not None:
        prep.table.to_csv(p["minmax"])
        written.append(p["minmax"])
    write_manifest(out, "train", cfg, written, data=prep.data.fingerprint())
    return EXIT_OK


def _load_categorization(cfg: ExperimentConfig, out: Path, names) -> FeatureCategorization:
    if cfg.discrete_override is not None:
        return override(names, cfg.discrete_override)
    path = _require(_paths(out)["categorization"], "categorize")
    return FeatureCategorization.load(path, names)


def _attack_dir(out: Path, mode: str, strategy: str) -> Path:
    return out / f"attack-{mode}-{strategy.lower()}"


def cmd_attack(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    p = _paths(out)
    det = Detector.load(_require(p["detector"], "train"))
    data_path = Path(args.data) if args.data else _require(p["test"], "train")
    test = load_normalized(data_path)
    det.check_schema(test)
    source = pipeline.attack_rows(cfg, test)
    if source.n_rows == 0:
        raise ValueError("no rows selected for attack")
    strategy = args.strategy or cfg.attack_strategy
    dm = cat = None
    if args.mode == "nd":
        dm = DiffusionModel.load(_require(p["diffusion"], "train"))
        cat = _load_categorization(cfg, out, det.feature_names)
    res = pipeline.run_mode(cfg, args.mode, strategy, det, source, dm, cat)

    target = _attack_dir(out, args.mode, strategy)
    target.mkdir(parents=True, exist_ok=True)
    adv_path, src_path, sum_path = target / "adversarial.csv", target / "source.csv", target / "summary.json"
    extra = {k: v for k, v in res.columns.items() if k != "orig_label"}
    save_csv(res.dataset, adv_path, label_column="orig_label", extra_columns=extra)
    save_csv(source, src_path)
    _write_json(sum_path, res.summary)
    write_manifest(
        target, "attack", cfg, [adv_path, src_path, sum_path], inputs=[data_path, p["detector"]],
        mode=args.mode, strategy=strategy, discrete_override=cfg.discrete_override,
    )
    if res.summary.get("control_run"):
        log.info("control run: refinement_iters=0, outputs are pure diffusion reconstructions")
    rate = res.summary.get("fooled_rate", res.summary.get("success_rate"))
    log.info("%s %s on %d rows: rate %s", args.mode, strategy, source.n_rows, rate)
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out)
    p = _paths(out)
    strategy = args.strategy or cfg.attack_strategy
    adir = _attack_dir(out, args.mode, strategy)
    clean_path = Path(args.clean) if args.clean else _require(adir / "source.csv", "attack")
    adv_path = Path(args.adv) if args.adv else _require(adir / "adversarial.csv", "attack")
    det = Detector.load(_require(p["detector"], "train"))
    d1 = load_normalized(_require(p["d1"], "train"))
    clean = load_normalized(clean_path)
    label = "orig_label" if _has_column(adv_path, "orig_label") else "Label"
    extras = [c for c in EXTRA_COLUMNS[1:] if _has_column(adv_path, c)]
    adv = load_normalized(adv_path, label_column=label, drop_columns=extras)
    for ds in (d1, clean, adv):
        det.check_schema(ds)
    ev = pipeline.evaluate(cfg, det, d1, clean, adv)

    target = out / f"eval-{args.mode}-{strategy.lower()}"
    target.mkdir(parents=True, exist_ok=True)
    files = {
        "report": target / "report.json",
        "pca": target / "pca.csv",
        "corr": target / "corr_diff.csv",
        "roc": target / "roc.csv",
    }
    ev.report.meta.update({"mode": args.mode, "strategy": strategy})
    ev.report.save(files["report"])
    ev.pca.to_csv(files["pca"])
    matrix_to_csv(ev.corr_diff, clean.feature_names, files["corr"])
    ev.roc.to_csv(files["roc"])
    write_manifest(target, "evaluate", cfg, files.values(), inputs=[clean_path, adv_path, p["detector"]])
    r = ev.report
    log.info("acc %.4f -> %.4f, AUC %.4f, MMD2 %.5f, W1 %.5f", r.acc_before, r.acc_after, r.auc_roc, r.mmd2, r.wasserstein)
    return EXIT_OK


CRITERIA_LABELS = {
    "attack_efficacy": "baseline drop >= 30 points, ND drop smaller",
    "stealth": "ND MMD2 and W1 below baseline (FGSM, PGD)",
    "detector_evasion": "Artifact AUC(FGSM) - AUC(ND-FGSM) >= 0.1",
}


def cmd_reproduce_desk(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.out) / "desk"
    out.mkdir(parents=True, exist_ok=True)
    run = pipeline.desk_run(cfg)
    report_path = out / "report.json"
    _write_json(report_path, run.report)
    write_manifest(out, "reproduce-desk", cfg, [report_path])
    rep = run.report
    print(f"clean accuracy {rep['clean_accuracy']:.4f} on {run.prepared.test.n_rows} held-out rows")
    print(f"{'attack':<10}{'acc_after':>10}{'auc':>8}{'mmd2':>10}{'w1':>9}")
    for strategy, modes in rep["runs"].items():
        for mode, r in modes.items():
            name = strategy if mode == "baseline" else f"ND-{strategy}"
            print(f"{name:<10}{r['acc_after']:>10.4f}{r['auc_roc']:>8.3f}{r['mmd2']:>10.5f}{r['wasserstein']:>9.5f}")
    for key, ok in rep["criteria"].items():
        print(f"{'PASS' if ok else 'FAIL'}  {key}: {CRITERIA_LABELS[key]}")
    return EXIT_OK


COMMANDS = {
    "categorize": cmd_categorize,
    "train": cmd_train,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "reproduce-desk": cmd_reproduce_desk,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flownae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="flat JSON config file")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--discrete-override", help="comma-separated Discrete feature names (skips clustering)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name in ("attack", "evaluate"):
            sp.add_argument("--mode", choices=("baseline", "nd"), default="nd")
            sp.add_argument("--strategy", choices=("FGSM", "PGD", "ACG"), type=str.upper)
        if name == "attack":
            sp.add_argument("--rows", choices=("malicious", "all"), help="which held-out rows to attack")
            sp.add_argument("--data", help="CSV to attack instead of the held-out split")
        if name == "evaluate":
            sp.add_argument("--clean", help="clean source CSV (defaults to the attack output)")
            sp.add_argument("--adv", help="adversarial CSV (defaults to the attack output)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if args.discrete_override is not None:
        names = [n.strip() for n in args.discrete_override.split(",") if n.strip()]
        if not names:
            raise ConfigError("--discrete-override needs at least one feature name")
        changes["discrete_override"] = names
    if getattr(args, "rows", None):
        changes["attack_rows"] = args.rows
    return cfg.replace(**changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
