import os

from ocflow.data import make_split, write_dataset
from ocflow.training import train
from utils.data_loader import (
    component_columns,
    compute_kpis,
    list_flow_files,
    list_runs,
    load_report,
    load_run_config,
    load_train_log,
    summarize_runs,
)


def test_run_discovery_and_kpis(tiny_run, tmp_path):
    cfg = tiny_run("oc")
    train(cfg)
    os.makedirs(tmp_path / "empty")
    runs_dir = str(tmp_path)
    assert list_runs(runs_dir) == ["oc"]
    assert load_run_config(cfg.out_dir)["strategy"] == "oc"
    log = load_train_log(cfg.out_dir)
    assert component_columns(log) == ["base", "zero_forcing", "mask_match"]

    kpis = compute_kpis(cfg.out_dir)
    assert kpis["steps"] == 2
    assert kpis["epe"] is not None and kpis["epe_start"] is not None
    assert kpis["parameter_count"] is None

    summary = summarize_runs(runs_dir)
    assert list(summary["Run"]) == ["oc"]
    assert summary["Strategy"].iloc[0] == "oc"
    assert summary["Steps"].iloc[0] == 2


def test_missing_artifacts_are_empty(tmp_path):
    assert list_runs(str(tmp_path / "nowhere")) == []
    assert load_report(str(tmp_path)).empty
    assert compute_kpis(str(tmp_path))["epe"] is None


def test_flow_files_follow_manifest(tiny_scene, tmp_path):
    root = str(tmp_path / "data")
    write_dataset(root, make_split(tiny_scene, 2, seed=0))
    files = list_flow_files(root)
    assert len(files) == 6
    assert files[0].endswith(os.path.join("seq_0000", "flow_0000.flo"))
