import json
from dataclasses import replace

import pytest

from delaypipe.config import DatasetConfig
from delaypipe.errors import ConfigError, StrategyError
from delaypipe.harness import (
    REPORT_COLUMNS,
    build_dataset,
    build_model,
    plan_for,
    run_comparison,
    run_experiment,
    strategy_slug,
)
from delaypipe.pipeline_exec import read_metrics_csv


def test_build_dataset_kinds(tiny_config, idx_dir):
    assert build_dataset(tiny_config).num_features == 2
    blobs = replace(tiny_config, dataset=DatasetConfig("blobs", classes=4, samples=100))
    assert build_dataset(blobs).num_classes == 4
    idx = replace(tiny_config, dataset=DatasetConfig("idx", path=str(idx_dir)))
    assert build_dataset(idx).num_features == 16


def test_build_model_checks_data_fit(tiny_config):
    data = build_dataset(tiny_config)
    assert build_model(tiny_config, data).sizes == [2, 16, 16, 3]
    with pytest.raises(ConfigError, match="do not fit"):
        build_model(replace(tiny_config, layers=[2, 16, 4]), data)


def test_plan_for_uses_config_partition(tiny_config):
    p, a = plan_for(replace(tiny_config, partition="2,1"))
    assert p.sizes == (2, 1)
    assert a.gradient_delay == (2, 2, 0)


def test_strategy_slug():
    assert strategy_slug("ema-fixed:0.9") == "ema-fixed_0.9"
    assert strategy_slug("stash") == "stash"


def test_run_experiment_per_strategy(tiny_config):
    sequential = run_experiment(tiny_config, "sequential")
    assert sequential.strategy == "sequential"
    assert len(sequential.records) == tiny_config.epochs
    stash = run_experiment(tiny_config, "stash")
    assert stash.strategy == "stash"
    assert sum(stash.peak_weight_copies) == 5 + 3
    with pytest.raises(StrategyError):
        run_experiment(tiny_config, "newest")


def test_run_experiment_trains_given_model(tiny_config):
    data = build_dataset(tiny_config)
    model = build_model(tiny_config, data)
    before = model.layers[0].W.copy()
    run_experiment(tiny_config, "latest", data, model)
    assert not (model.layers[0].W == before).all()


def test_comparison_writes_report(tiny_config, tmp_path):
    out = tmp_path / "cmp"
    report = run_comparison(tiny_config, out_dir=out)
    assert report.ok
    assert [r["strategy"] for r in report.rows] == tiny_config.strategies
    assert sorted(p.name for p in out.glob("*.csv")) == ["ema-pipeline.csv", "report.csv", "sequential.csv", "stash.csv"]
    assert len(read_metrics_csv(out / "stash.csv")) == tiny_config.epochs

    stash = report.row("stash")
    assert stash["peak_weight_copies"] == stash["predicted_weight_copies"] == 8
    assert stash["peak_weight_bytes"] == stash["predicted_weight_bytes"]
    ema = report.row("ema-pipeline")
    assert ema["peak_weight_copies"] == 0
    assert ema["accumulators"] == 2
    assert ema["accumulator_bytes"] > 0

    doc = json.loads((out / "report.json").read_text())
    assert doc["diverged"] == []
    assert set(doc["runs"][0]) == set(REPORT_COLUMNS)
    assert (out / "report.csv").read_text().splitlines()[0] == ",".join(REPORT_COLUMNS)


def test_comparison_records_divergence(tiny_config, tmp_path):
    cfg = replace(tiny_config, strategies=["latest"], sgd=replace(tiny_config.sgd, lr=1e308))
    report = run_comparison(cfg, out_dir=tmp_path)
    assert not report.ok
    assert report.diverged == ["latest"]
    assert report.row("latest")["diverged"] is True
    assert report.row("latest")["final_test_acc"] is None


def test_comparison_is_deterministic(tiny_config, tmp_path):
    cfg = replace(tiny_config, strategies=["stash", "ema-pipeline"])
    run_comparison(cfg, out_dir=tmp_path / "a")
    run_comparison(cfg, out_dir=tmp_path / "b")
    for name in ("stash.csv", "ema-pipeline.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
