"""
Experiment orchestration: build data and model from an ExperimentConfig, run
one strategy or a whole comparison, and write per-strategy CSVs plus a
combined report.
"""

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from delaypipe.config import ExperimentConfig
from delaypipe.datasets import Dataset, generate_blobs, generate_spiral, load_idx_dataset
from delaypipe.delay_planner import DelayAssignment, accumulator_bytes, derive_delays, stash_weight_bytes, storage_cost
from delaypipe.errors import ConfigError, TrainingDivergedError
from delaypipe.nn_core import Mlp, init_mlp
from delaypipe.pipeline_exec import PipelineSchedule, RunMetrics, make_microbatches, run_pipeline, run_sequential
from delaypipe.retimer import StagePartition
from delaypipe.weight_provider import StrategySpec, make_provider

logger = logging.getLogger(__name__)

SEQUENTIAL = "sequential"

REPORT_COLUMNS = (
    "strategy",
    "final_test_acc",
    "final_loss",
    "epochs_to_threshold",
    "peak_weight_copies",
    "predicted_weight_copies",
    "peak_weight_bytes",
    "predicted_weight_bytes",
    "accumulators",
    "accumulator_bytes",
    "peak_act_bytes",
    "diverged",
)


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.kind == "spiral":
        return generate_spiral(d.classes, d.samples, d.noise, cfg.seed)
    if d.kind == "blobs":
        return generate_blobs(d.classes, d.samples, d.spread, cfg.seed)
    return load_idx_dataset(d.path)


def build_model(cfg: ExperimentConfig, dataset: Dataset) -> Mlp:
    if cfg.layers[0] != dataset.num_features or cfg.layers[-1] != dataset.num_classes:
        raise ConfigError(
            f"Layer sizes {cfg.layers} do not fit the data "
            f"({dataset.num_features} features, {dataset.num_classes} classes)"
        )
    return init_mlp(cfg.layers, cfg.seed)


def strategy_slug(strategy: str) -> str:
    return strategy.replace(":", "_").replace("/", "_")


def plan_for(cfg: ExperimentConfig) -> Tuple[StagePartition, DelayAssignment]:
    partition = StagePartition.parse(cfg.partition, cfg.num_layers)
    return partition, derive_delays(cfg.num_layers, partition)


def run_experiment(
    cfg: ExperimentConfig,
    strategy: Optional[str] = None,
    dataset: Optional[Dataset] = None,
    model: Optional[Mlp] = None,
) -> RunMetrics:
    """Train once with ``strategy`` (default: the config's) and return its metrics.

    ``model`` is trained in place when given, so callers can keep the final parameters.
    """
    strategy = strategy or cfg.strategy
    dataset = dataset if dataset is not None else build_dataset(cfg)
    model = model if model is not None else build_model(cfg, dataset)
    stream = make_microbatches(dataset.x_train, dataset.y_train, cfg.batch_size, cfg.epochs, cfg.seed)
    sgd = cfg.sgd_config(len(stream))
    if strategy == SEQUENTIAL:
        return run_sequential(model, stream, sgd, dataset)
    spec = StrategySpec.parse(strategy)
    partition, assignment = plan_for(cfg)
    provider = make_provider(spec, assignment, cfg.warmup_iterations(len(dataset.x_train)), cfg.accumulate_mode())
    schedule = PipelineSchedule(partition, assignment, len(stream))
    logger.info(f"Training {spec.label} on partition {partition} for {cfg.epochs} epochs")
    return run_pipeline(model, schedule, stream, provider, sgd, dataset, label=spec.label, parallel=cfg.parallel)


def _run_one(cfg: ExperimentConfig, strategy: str) -> Tuple[str, Optional[RunMetrics], Optional[str]]:
    try:
        return strategy, run_experiment(cfg, strategy), None
    except TrainingDivergedError as e:
        return strategy, None, str(e)


@dataclass
class ComparisonReport:
    rows: List[Dict[str, Any]] = field(default_factory=list)
    diverged: List[str] = field(default_factory=list)
    csv_paths: Dict[str, Path] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return not self.diverged

    def row(self, strategy: str) -> Dict[str, Any]:
        for r in self.rows:
            if r["strategy"] == strategy:
                return r
        raise KeyError(strategy)


def _report_row(cfg: ExperimentConfig, strategy: str, metrics: Optional[RunMetrics], weight_bytes: Sequence[int]) -> Dict[str, Any]:
    row: Dict[str, Any] = {c: None for c in REPORT_COLUMNS}
    row["strategy"] = strategy
    row["diverged"] = metrics is None
    if strategy != SEQUENTIAL:
        _, assignment = plan_for(cfg)
        s = StrategySpec.parse(strategy).strategy
        row["predicted_weight_copies"] = storage_cost(assignment, s).stashed_weight_copies
        row["predicted_weight_bytes"] = stash_weight_bytes(assignment, s, weight_bytes)
        row["accumulator_bytes"] = accumulator_bytes(assignment, s, weight_bytes)
    else:
        row["predicted_weight_copies"] = row["predicted_weight_bytes"] = row["accumulator_bytes"] = 0
    if metrics is not None:
        summary = metrics.summary()
        for key in ("final_test_acc", "final_loss", "epochs_to_threshold", "peak_weight_copies", "peak_weight_bytes", "accumulators", "peak_act_bytes"):
            row[key] = summary[key]
    return row


def run_comparison(cfg: ExperimentConfig, strategies: Optional[Sequence[str]] = None, out_dir: Optional[Union[str, Path]] = None) -> ComparisonReport:
    """Run every strategy on identical data and seed; write CSVs and report.{csv,json}."""
    strategies = list(strategies or cfg.strategies)
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    weight_bytes = build_model(cfg, dataset).weight_bytes()

    if cfg.workers > 1 and len(strategies) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_one, [cfg] * len(strategies), strategies))
    else:
        results = [_run_one(cfg, s) for s in strategies]

    report = ComparisonReport()
    for strategy, metrics, error in results:
        if metrics is None:
            logger.error(f"Strategy {strategy} diverged: {error}")
            report.diverged.append(strategy)
        else:
            path = out / f"{strategy_slug(strategy)}.csv"
            metrics.write_csv(path)
            report.csv_paths[strategy] = path
        report.rows.append(_report_row(cfg, strategy, metrics, weight_bytes))

    write_report(report, out)
    return report


def write_report(report: ComparisonReport, out: Path) -> None:
    with open(out / "report.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in report.rows:
            writer.writerow(["" if row[c] is None else row[c] for c in REPORT_COLUMNS])
    document = {"runs": report.rows, "diverged": report.diverged}
    (out / "report.json").write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
