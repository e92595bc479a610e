import json

import pytest
from click.testing import CliRunner

from lesionlab.cli import DEFAULT_CONFIG, STAGES, load_config, main, stage_hash


SMALL = [
    "--toy-mode", "--seed", "3",
    "--set", "toy.classes=3",
    "--set", "toy.per_class_counts=[14,8,8]",
    "--set", "gan.epochs=1",
    "--set", "gan.batch_size=8",
    "--set", "gan.g_base_channels=32",
    "--set", "gan.d_base_channels=8",
    "--set", "classifier.max_epochs=2",
    "--set", "classifier.patience=2",
    "--set", "classifier.batch_size=8",
    "--set", "classifier.lr=1e-3",
    "--set", "xai.target_segments=6",
    "--set", "xai.lime_samples=64",
    "--set", "xai.shap_permutations=20",
]


def invoke(run_dir, *args, extra_sets=()):
    runner = CliRunner()
    argv = ["--run-dir", str(run_dir), *SMALL, *extra_sets, *args]
    return runner.invoke(main, argv)


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("clirun")
    result = invoke(run_dir, "run-all")
    assert result.exit_code == 0, result.output
    return run_dir


def test_run_all_completes_and_writes_artifacts(completed_run):
    for name in ["manifest.json", "split.json", "plan.json", "balanced_manifest.json",
                 "balanced_split.json", "clf_best.ckpt", "training_history.csv",
                 "metrics.json", "ledger.json"]:
        assert (completed_run / name).exists(), name
    for name in ["metrics.json", "confusion_matrix.png", "accuracy_curve.png",
                 "loss_curve.png", "per_class_table.csv", "comparison_table.csv"]:
        assert (completed_run / "report" / name).exists(), name
    pngs = list((completed_run / "explanations").glob("*.png"))
    assert len(pngs) == 2  # one lime + one shap overlay
    ledger = json.loads((completed_run / "ledger.json").read_text())
    assert all(ledger["stages"][s]["status"] == "done" for s in STAGES)
    assert not (completed_run / ".lock").exists()


def test_rerun_done_stage_is_noop(completed_run):
    before = (completed_run / "metrics.json").read_bytes()
    stamp = (completed_run / "ledger.json").read_text()
    result = invoke(completed_run, "evaluate")
    assert result.exit_code == 0
    assert "already done" in result.output
    assert (completed_run / "metrics.json").read_bytes() == before
    assert (completed_run / "ledger.json").read_text() == stamp


def test_stage_with_missing_upstream_exits_4(tmp_path):
    result = invoke(tmp_path / "fresh", "evaluate")
    assert result.exit_code == 4
    err = json.loads((tmp_path / "fresh" / "error.json").read_text())
    assert err["error_type"] == "StaleUpstream"


def test_config_drift_upstream_exits_4(completed_run):
    # changing the gan config invalidates the recorded train-gan hash
    result = invoke(completed_run, "synthesize", extra_sets=("--set", "gan.lr_g=2e-5"))
    assert result.exit_code == 4
    assert "different config" in result.output


def test_unknown_config_key_exits_2(tmp_path):
    result = invoke(tmp_path / "r", "ingest", extra_sets=("--set", "gan.bogus=1"))
    assert result.exit_code == 2


def test_ingest_without_paths_or_toy_mode_fails(tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, ["--run-dir", str(tmp_path / "r"), "ingest"])
    assert result.exit_code == 3
    err = json.loads((tmp_path / "r" / "error.json").read_text())
    assert err["error_type"] == "ConfigError"


def test_stage_hash_cumulative():
    a = load_config(None)
    b = load_config(None, overrides=("gan.epochs=5",))
    assert stage_hash("split", a) == stage_hash("split", b)
    assert stage_hash("train-gan", a) != stage_hash("train-gan", b)
    # downstream stages inherit the drift
    assert stage_hash("report", a) != stage_hash("report", b)


def test_config_file_and_overrides(tmp_path):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps({"gan": {"epochs": 7}, "seed": 9}))
    config = load_config(cfg_path, overrides=("classifier.patience=2",))
    assert config["gan"]["epochs"] == 7
    assert config["seed"] == 9
    assert config["classifier"]["patience"] == 2
    # untouched keys keep defaults
    assert config["gan"]["lr_g"] == DEFAULT_CONFIG["gan"]["lr_g"]


def test_identical_seed_runs_reproduce_metrics(tmp_path, completed_run):
    result = invoke(tmp_path / "again", "run-all")
    assert result.exit_code == 0, result.output
    a = (completed_run / "metrics.json").read_bytes()
    b = (tmp_path / "again" / "metrics.json").read_bytes()
    assert a == b
