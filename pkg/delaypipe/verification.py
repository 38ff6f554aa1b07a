"""
Acceptance suites run by ``delaypipe verify``.

Each suite returns a CheckResult; suites marked slow are skipped unless asked
for.
"""

import filecmp
import logging
import statistics
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from delaypipe.config import DatasetConfig, ExperimentConfig, SgdSection
from delaypipe.datasets import generate_spiral
from delaypipe.delay_planner import WeightStrategy, derive_delays, storage_cost
from delaypipe.graph_ir import BUBBLE, NodeKind, build_training_graph, random_semantics, simulate
from delaypipe.harness import run_comparison, run_experiment
from delaypipe.nn_core import SgdConfig, grad_check, init_mlp
from delaypipe.pipeline_exec import PipelineSchedule, make_microbatches, run_delayed_serial, run_pipeline, run_sequential
from delaypipe.retimer import StagePartition, all_partitions, compact, insert_initial_delays
from delaypipe.weight_provider import GradientAverager, StashBuffer, StrategySpec, UpdateLog, exact_history_oracle, make_provider

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def check_closed_form(max_layers: int = 6) -> str:
    count = 0
    for L in range(1, max_layers + 1):
        for p in all_partitions(L):
            g = insert_initial_delays(build_training_graph(L), p)
            _, extracted = compact(g, p)
            expected = derive_delays(L, p)
            if extracted != expected:
                raise AssertionError(f"Partition {p}: retimer gives {extracted}, closed form {expected}")
            count += 1
    return f"{count} partitions agree"


def check_retiming_equivalence(max_layers: int = 4, seeds: int = 20, steps: int = 24) -> str:
    """Compacted graph equals the delay-inserted graph exactly; with frozen weights it
    equals the unpipelined graph shifted by the pipeline latency."""
    count = 0
    for L in range(1, max_layers + 1):
        base = build_training_graph(L)
        updates = [n.id for n in base.nodes if n.kind is NodeKind.WEIGHT_UPDATE]
        for p in all_partitions(L):
            inserted = insert_initial_delays(base, p)
            compacted, _ = compact(inserted, p)
            latency = 2 * (p.num_stages - 1)
            for seed in range(seeds):
                semantics, initial = random_semantics(base, seed)
                stream = [int(v) for v in np.random.default_rng(seed).integers(0, 1000, size=steps)]
                expected = simulate(inserted, stream, steps + latency, semantics, BUBBLE, initial)
                actual = simulate(compacted, stream, steps + latency, semantics, BUBBLE, initial)
                if actual != expected:
                    raise AssertionError(f"Partition {p}, seed {seed}: compacted graph differs from inserted graph")
                frozen = dict(semantics)
                for u in updates:
                    frozen[u] = lambda state, *_: state
                reference = simulate(base, stream, steps, frozen, BUBBLE, initial)
                shifted = simulate(compacted, stream, steps + latency, frozen, BUBBLE, initial)
                if shifted[latency:] != reference or any(v is not BUBBLE for v in shifted[:latency]):
                    raise AssertionError(f"Partition {p}, seed {seed}: output is not a {latency}-step shift")
                count += 1
    return f"{count} simulations equivalent"


def check_averager_mean(sequences: int = 100, length: int = 50) -> str:
    """Analytic-beta average against numpy's mean of every prefix, normwise relative error."""
    worst = 0.0
    for seed in range(sequences):
        rng = np.random.default_rng(seed)
        gs = rng.standard_normal((length, 3))
        averager = GradientAverager()
        for i, g in enumerate(gs):
            averager.update(g)
            mean = gs[: i + 1].mean(axis=0)
            err = float(np.linalg.norm(averager.mean - mean) / max(float(np.linalg.norm(mean)), 1e-12))
            worst = max(worst, err)
    if worst >= 1e-10:
        raise AssertionError(f"Running mean relative error {worst:.3e}")
    return f"max relative error {worst:.2e}"


def dyadic_update_run(seed: int, steps: int, k: int):
    """Plain-SGD style run on dyadic values: yields (t, W(t), stash, log) after each stash."""
    rng = np.random.default_rng(seed)
    lr = 2.0 ** -4
    w = rng.integers(-64, 64, size=(3, 2)).astype(np.float64) / 2 ** 6
    stash = StashBuffer(k + 1)
    log = UpdateLog(1)
    for t in range(steps):
        if len(stash) == k + 1:
            stash.drop(stash.versions()[0])
        stash.put(t, w)
        yield t, w, stash, log
        g = rng.integers(-16, 16, size=w.shape).astype(np.float64) / 2 ** 4
        update = -(lr * g)
        log.record(0, t, update)
        w = w + update


def check_exact_history(seeds: int = 20, steps: int = 200, k: int = 5) -> str:
    checked = 0
    for seed in range(seeds):
        for t, w, stash, log in dyadic_update_run(seed, steps, k):
            if t < k:
                continue
            rebuilt = exact_history_oracle(w, log.window(0, t, k), t, k)
            if not np.array_equal(rebuilt, stash.get(t - k)):
                raise AssertionError(f"Seed {seed}, step {t}: oracle differs from stashed weights")
            checked += 1
    return f"{checked} historical weights rebuilt bit-exactly"


def _small_stream(seed: int, microbatches: int, batch: int = 8):
    data = generate_spiral(3, microbatches * batch, 0.1, seed)
    stream = make_microbatches(data.x_train, data.y_train, batch, 2, seed)
    return stream[:microbatches]


def check_pipeline_oracle(max_layers: int = 4, ticks: int = 200, seed: int = 0) -> str:
    cfg = SgdConfig(lr=0.05)
    stream = _small_stream(seed, ticks)
    count = 0
    for L in range(1, max_layers + 1):
        sizes = [2] + [8] * (L - 1) + [3]
        for p in all_partitions(L):
            a = derive_delays(L, p)
            piped = run_pipeline(
                init_mlp(sizes, seed), PipelineSchedule(p, a, len(stream)), stream,
                make_provider(StrategySpec(WeightStrategy.EXACT_STASH), a), cfg, capture_trajectory=True,
            )
            serial = run_delayed_serial(init_mlp(sizes, seed), a, stream, cfg, capture_trajectory=True)
            for step, (x, y) in enumerate(zip(piped.trajectory, serial.trajectory)):
                if not all(np.array_equal(u, v) for u, v in zip(x, y)):
                    raise AssertionError(f"Partition {p}: trajectories differ at update {step}")
            count += 1
    return f"{count} partitions bit-identical over {ticks} ticks"


def check_degenerate(layers: int = 3, ticks: int = 200, seed: int = 0) -> str:
    cfg = SgdConfig(lr=0.05)
    stream = _small_stream(seed, ticks)
    sizes = [2] + [16] * (layers - 1) + [3]
    p = StagePartition.single(layers)
    a = derive_delays(layers, p)
    piped = run_pipeline(init_mlp(sizes, seed), PipelineSchedule(p, a, len(stream)), stream, make_provider(StrategySpec(WeightStrategy.LATEST), a), cfg, capture_trajectory=True)
    seq = run_sequential(init_mlp(sizes, seed), stream, cfg, capture_trajectory=True)
    for step, (x, y) in enumerate(zip(piped.trajectory, seq.trajectory)):
        if not all(np.array_equal(u, v) for u, v in zip(x, y)):
            raise AssertionError(f"Single-stage pipeline differs from sequential at update {step}")
    return f"{ticks} updates bit-identical"


def check_gradients(instances: int = 100, tolerance: float = 1e-4) -> str:
    worst = 0.0
    for seed in range(instances):
        rng = np.random.default_rng(seed)
        mlp = init_mlp([2, 3, 2], seed)
        for layer in mlp.layers:
            layer.b = rng.standard_normal(layer.b.shape) * 0.1
        x = rng.standard_normal((4, 2))
        y = rng.integers(0, 2, size=4)
        errors = grad_check(mlp, x, y, eps=1e-5)
        worst = max(worst, max(errors.values()))
    if worst >= tolerance:
        raise AssertionError(f"Gradient check relative error {worst:.3e}")
    return f"max relative error {worst:.2e}"


def check_storage(layers: int = 8, ticks: int = 40, seed: int = 0) -> str:
    p = StagePartition.per_layer(layers)
    a = derive_delays(layers, p)
    stream = _small_stream(seed, ticks)
    sizes = [2] + [4] * (layers - 1) + [3]
    cfg = SgdConfig(lr=0.01)
    results = {}
    for strategy in (WeightStrategy.EXACT_STASH, WeightStrategy.PIPELINE_EMA):
        metrics = run_pipeline(init_mlp(sizes, seed), PipelineSchedule(p, a, len(stream)), stream, make_provider(StrategySpec(strategy), a), cfg)
        predicted = storage_cost(a, strategy)
        if sum(metrics.peak_weight_copies) != predicted.stashed_weight_copies:
            raise AssertionError(f"{strategy.value}: measured {sum(metrics.peak_weight_copies)} weight copies, predicted {predicted.stashed_weight_copies}")
        if metrics.accumulators != predicted.ema_accumulators:
            raise AssertionError(f"{strategy.value}: {metrics.accumulators} accumulators, predicted {predicted.ema_accumulators}")
        if metrics.peak_activation_slots != [a.activation_slots(l) for l in range(layers)]:
            raise AssertionError(f"{strategy.value}: activation peaks {metrics.peak_activation_slots}")
        results[strategy.value] = (sum(metrics.peak_weight_copies), metrics.accumulators)
    return ", ".join(f"{k}: {c} copies/{acc} accumulators" for k, (c, acc) in results.items())


def convergence_config(seed: int) -> ExperimentConfig:
    """Four-stage benchmark (staleness 7, 5, 3, 0) tuned so the backward weight version matters.

    Small noisy batches at a high step size keep W(t) - W(t - k) large; the
    noisy spiral keeps test accuracy off the ceiling so the strategies separate.
    """
    return ExperimentConfig(
        dataset=DatasetConfig("spiral", classes=3, samples=2400, noise=0.3),
        layers=[2, 64, 64, 64, 3],
        partition="per-layer",
        sgd=SgdSection(lr=0.08),
        epochs=6,
        batch_size=8,
        warmup=50,
        seed=seed,
    )


def check_convergence_ordering(seeds: int = 5) -> str:
    strategies = ("stash", "ema-pipeline", "ema-fixed:0.9", "latest")
    finals: Dict[str, List[float]] = {s: [] for s in strategies}
    for seed in range(seeds):
        cfg = convergence_config(seed)
        for s in strategies:
            finals[s].append(run_experiment(cfg, s).final_test_acc)
    med = {s: statistics.median(v) for s, v in finals.items()}
    detail = ", ".join(f"{s}={v:.3f}" for s, v in med.items())
    if not med["stash"] >= med["ema-pipeline"] - 0.02:
        raise AssertionError(f"ema-pipeline does not track stash: {detail}")
    if not (med["ema-pipeline"] > med["ema-fixed:0.9"] > med["latest"]):
        raise AssertionError(f"Unexpected strategy ordering: {detail}")
    return f"median final accuracy {detail}"


def check_determinism() -> str:
    cfg = replace(
        convergence_config(0),
        dataset=DatasetConfig("spiral", classes=3, samples=600, noise=0.2),
        epochs=2,
        strategies=["sequential", "stash", "ema-pipeline"],
    )
    with tempfile.TemporaryDirectory() as tmp:
        first, second = Path(tmp) / "a", Path(tmp) / "b"
        run_comparison(cfg, out_dir=first)
        run_comparison(cfg, out_dir=second)
        names = sorted(p.name for p in first.glob("*.csv"))
        _, mismatch, errors = filecmp.cmpfiles(first, second, names, shallow=False)
        if mismatch or errors:
            raise AssertionError(f"Outputs differ between runs: {mismatch + errors}")
    return f"{len(names)} CSV files byte-identical"


SUITES: Dict[str, Callable[[], str]] = {
    "closed-form": check_closed_form,
    "retiming-equivalence": check_retiming_equivalence,
    "averager-mean": check_averager_mean,
    "exact-history": check_exact_history,
    "pipeline-oracle": check_pipeline_oracle,
    "degenerate": check_degenerate,
    "gradients": check_gradients,
    "storage": check_storage,
    "determinism": check_determinism,
    "convergence-ordering": check_convergence_ordering,
}

SLOW_SUITES = {"convergence-ordering"}


def run_verification(names: Optional[Sequence[str]] = None, include_slow: bool = False) -> List[CheckResult]:
    selected = list(names) if names else [n for n in SUITES if include_slow or n not in SLOW_SUITES]
    unknown = [n for n in selected if n not in SUITES]
    if unknown:
        raise KeyError(f"Unknown verification suite(s): {', '.join(unknown)}")
    results = []
    for name in selected:
        start = time.perf_counter()
        try:
            detail = SUITES[name]()
            passed = True
        except AssertionError as e:
            detail, passed = str(e), False
        elapsed = time.perf_counter() - start
        logger.info(f"{name}: {'PASS' if passed else 'FAIL'} in {elapsed:.2f}s")
        results.append(CheckResult(name, passed, detail, elapsed))
    return results


def format_results(results: Sequence[CheckResult]) -> str:
    width = max((len(r.name) for r in results), default=0)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  {r.seconds:7.2f}s  {r.detail}" for r in results]
    return "\n".join(lines)
