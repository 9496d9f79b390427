import json

import numpy as np
import pytest

from flownae import cli
from flownae.config import ConfigError, ExperimentConfig, stage_seed

SMALL = {
    "seed": 5,
    "synth_n_flows": 1200,
    "detector_epochs": 20,
    "diffusion_hidden": [32, 32],
    "diffusion_T": 20,
    "diffusion_iters": 200,
    "t_fwd": 8,
    "t_rev": 8,
    "eval_rows": 40,
    "ae_passes": 10,
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.json"
    cfg.write_text(json.dumps({**SMALL, "out": str(root / "run")}))
    for cmd in ("categorize", "train"):
        assert cli.main([cmd, "--config", str(cfg)]) == 0
    return root, cfg


def test_categorize_and_train_outputs(workdir):
    root, _ = workdir
    run = root / "run"
    for name in ("categorization.json", "dendrogram.csv", "detector.json", "diffusion.json", "manifest-train.json"):
        assert (run / name).is_file()
    manifest = json.loads((run / "manifest-train.json").read_text())
    assert manifest["seed"] == 5
    assert manifest["stage_seeds"]["detector"] == stage_seed(5, "detector")
    assert set(manifest["outputs"]) >= {"detector.json", "diffusion.json", "d1.csv"}


@pytest.mark.parametrize("mode", ["baseline", "nd"])
def test_attack_then_evaluate(workdir, mode):
    root, cfg = workdir
    assert cli.main(["attack", "--config", str(cfg), "--mode", mode, "--strategy", "fgsm"]) == 0
    adir = root / "run" / f"attack-{mode}-fgsm"
    summary = json.loads((adir / "summary.json").read_text())
    assert summary["n_rows"] == 40
    header = (adir / "adversarial.csv").read_text().splitlines()[0].split(",")
    assert "orig_label" in header
    assert cli.main(["evaluate", "--config", str(cfg), "--mode", mode, "--strategy", "FGSM"]) == 0
    report = json.loads((root / "run" / f"eval-{mode}-fgsm" / "report.json").read_text())
    for key in ("acc_before", "acc_after", "auc_roc", "mmd2", "wasserstein", "asr"):
        assert key in report
    assert report["meta"]["mmd_bandwidth"] > 0


def test_rerun_is_identical(workdir):
    root, cfg = workdir
    adv = root / "run" / "attack-nd-pgd" / "adversarial.csv"
    assert cli.main(["attack", "--config", str(cfg)]) == 0
    first = adv.read_bytes()
    assert cli.main(["attack", "--config", str(cfg)]) == 0
    assert adv.read_bytes() == first


def test_control_run_is_flagged(workdir):
    root, _ = workdir
    ctrl = root / "ctrl.json"
    ctrl.write_text(json.dumps({**SMALL, "out": str(root / "run"), "refinement_iters": 0}))
    assert cli.main(["attack", "--config", str(ctrl), "--mode", "nd"]) == 0
    summary = json.loads((root / "run" / "attack-nd-pgd" / "summary.json").read_text())
    assert summary["control_run"] is True and summary["mean_adv_calls"] == 0


def test_schema_drift_exit_code(workdir, capsys):
    root, cfg = workdir
    test_csv = (root / "run" / "splits" / "test.csv").read_text().splitlines()
    names = test_csv[0].split(",")
    names[0] = "renamed"
    drift = root / "drift.csv"
    drift.write_text("\n".join([",".join(names), *test_csv[1:]]) + "\n")
    assert cli.main(["attack", "--config", str(cfg), "--data", str(drift)]) == cli.EXIT_SCHEMA
    assert "schema drift" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_key": 1}))
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert cli.main(["train", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    bad.write_text(json.dumps({"t_fwd": 5, "t_rev": 6}))
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG
    bad.write_text(json.dumps({"data_csv": str(tmp_path / "nope.csv")}))
    assert cli.main(["train", "--config", str(bad)]) == cli.EXIT_CONFIG


def test_missing_checkpoint(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**SMALL, "out": str(tmp_path / "empty")}))
    assert cli.main(["attack", "--config", str(cfg)]) == cli.EXIT_RUNTIME


def test_discrete_override(workdir):
    root, cfg = workdir
    out = root / "ovr"
    assert cli.main(["categorize", "--config", str(cfg), "--out", str(out), "--discrete-override", "ind0, ind1"]) == 0
    doc = json.loads((out / "categorization.json").read_text())
    assert doc["discrete"] == ["ind0", "ind1"] and doc["source"] == "override"


def test_config_round_trip_and_hash():
    cfg = ExperimentConfig.from_dict(SMALL)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.replace(out="elsewhere").config_hash() == cfg.config_hash()
    assert cfg.replace(seed=6).config_hash() != cfg.config_hash()
    with pytest.raises(ConfigError):
        cfg.replace(attack_rows="benign")


def test_reproduce_desk_is_deterministic(tmp_path, capsys):
    reports = []
    for name in ("a", "b"):
        cfg = tmp_path / f"{name}.json"
        cfg.write_text(json.dumps({**SMALL, "out": str(tmp_path / name)}))
        assert cli.main(["reproduce-desk", "--config", str(cfg)]) == 0
        reports.append((tmp_path / name / "desk" / "report.json").read_bytes())
    assert reports[0] == reports[1]
    out = capsys.readouterr().out
    assert "ND-FGSM" in out and ("PASS" in out or "FAIL" in out)
