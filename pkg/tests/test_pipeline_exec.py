import numpy as np
import pytest

from delaypipe.datasets import generate_blobs, generate_spiral
from delaypipe.delay_planner import WeightStrategy, derive_delays
from delaypipe.errors import PartitionError, StashError, TrainingDivergedError
from delaypipe.nn_core import ForwardCache, Layer, Mlp, SgdConfig, accuracy, init_mlp
from delaypipe.pipeline_exec import (
    CSV_COLUMNS,
    ActivationStash,
    Microbatch,
    Phase,
    PipelineExecutor,
    PipelineSchedule,
    build_slot_table,
    make_microbatches,
    read_metrics_csv,
    run_delayed_serial,
    run_pipeline,
    run_sequential,
)
from delaypipe.retimer import StagePartition
from delaypipe.verification import check_degenerate, check_pipeline_oracle
from delaypipe.weight_provider import ExactStashProvider, StrategySpec, UpdateLog, exact_history_oracle, make_provider


@pytest.fixture(scope="module")
def spiral():
    return generate_spiral(3, 400, 0.1, seed=0)


def _stream(data, batch=16, epochs=2):
    return make_microbatches(data.x_train, data.y_train, batch, epochs, seed=0)


def _pipeline(strategy, sizes, partition, stream, data=None, **options):
    a = derive_delays(partition.num_layers, partition)
    provider = make_provider(StrategySpec.parse(strategy), a)
    schedule = PipelineSchedule(partition, a, len(stream))
    return run_pipeline(init_mlp(sizes, 0), schedule, stream, provider, SgdConfig(lr=0.05), data, **options)


def test_microbatches_cover_every_sample_per_epoch(spiral):
    stream = _stream(spiral, batch=48, epochs=2)
    per_epoch = [mb for mb in stream if mb.epoch == 0]
    assert sum(len(mb.y) for mb in per_epoch) == len(spiral.y_train)
    assert [mb.index for mb in stream] == list(range(len(stream)))
    assert len(per_epoch[-1].y) == len(spiral.y_train) % 48
    again = _stream(spiral, batch=48, epochs=2)
    assert all(np.array_equal(a.x, b.x) for a, b in zip(stream, again))


def test_schedule_slots():
    p = StagePartition.per_layer(3)
    schedule = PipelineSchedule(p, derive_delays(3, p), 5)
    assert schedule.stage_staleness == [5, 3, 0]
    assert schedule.num_ticks == 10
    assert schedule.forward_microbatch(2, 2) == 0
    assert schedule.forward_microbatch(2, 1) is None
    assert schedule.backward_microbatch(2, 2) == 0
    assert schedule.backward_microbatch(1, 4) == 0
    assert schedule.backward_microbatch(0, 5) == 0
    assert schedule.backward_microbatch(0, 9) == 4
    assert schedule.backward_microbatch(0, 4) is None
    for s in range(3):
        assert schedule.backward_tick(1, s) - schedule.forward_tick(1, s) == schedule.stage_staleness[s]
    # the input stage's backward lands on tick m + N - 1 + (N - 1 - s)
    assert schedule.backward_tick(1, 0) == 1 + 2 + 2


def test_slot_table_events():
    p = StagePartition.from_sizes([1, 1])
    table = build_slot_table(p, derive_delays(2, p), 2)
    assert len(table) == 5
    events = [[(e.stage, e.phase, e.microbatch) for e in tick.events] for tick in table]
    assert events[0] == [(0, Phase.FORWARD, 0)]
    assert events[1] == [
        (0, Phase.FORWARD, 1),
        (1, Phase.FORWARD, 0),
        (1, Phase.BACKWARD, 0),
        (1, Phase.UPDATE, 0),
    ]
    assert events[2] == [(1, Phase.FORWARD, 1), (1, Phase.BACKWARD, 1), (1, Phase.UPDATE, 1)]
    assert events[3] == [(0, Phase.BACKWARD, 0), (0, Phase.UPDATE, 0)]
    assert events[4] == [(0, Phase.BACKWARD, 1), (0, Phase.UPDATE, 1)]


def test_every_tick_orders_backwards_before_updates():
    p = StagePartition.per_layer(4)
    for tick in build_slot_table(p, derive_delays(4, p), 12):
        seen = set()
        for e in tick.events:
            if e.phase is Phase.BACKWARD:
                seen.add(e.stage)
            elif e.phase is Phase.UPDATE:
                assert e.stage in seen


def test_schedule_rejects_mismatched_assignment():
    with pytest.raises(PartitionError):
        PipelineSchedule(StagePartition.per_layer(3), derive_delays(3, StagePartition.single(3)), 4)


def test_activation_stash_capacity():
    stash = ActivationStash([1])
    cache = ForwardCache(np.zeros((2, 2)), np.zeros((2, 1)))
    stash.push(0, 0, cache)
    assert stash.nbytes() == cache.x.nbytes + cache.z.nbytes
    with pytest.raises(StashError):
        stash.push(0, 1, cache)
    assert stash.pop(0, 0) is cache
    with pytest.raises(StashError):
        stash.pop(0, 0)


def test_exact_stash_pipeline_matches_delayed_serial(spiral):
    stream = _stream(spiral)
    p = StagePartition.from_sizes([1, 2])
    a = derive_delays(3, p)
    cfg = SgdConfig(lr=0.05)
    piped = run_pipeline(
        init_mlp([2, 8, 8, 3], 0), PipelineSchedule(p, a, len(stream)), stream,
        make_provider(StrategySpec.parse("stash"), a), cfg, spiral, capture_trajectory=True,
    )
    serial = run_delayed_serial(init_mlp([2, 8, 8, 3], 0), a, stream, cfg, spiral, capture_trajectory=True)
    assert len(piped.trajectory) == len(stream)
    for x, y in zip(piped.trajectory, serial.trajectory):
        assert all(np.array_equal(u, v) for u, v in zip(x, y))
    assert [r.test_acc for r in piped.records] == [r.test_acc for r in serial.records]


def test_pipeline_oracle_suite_small():
    assert "bit-identical" in check_pipeline_oracle(max_layers=3, ticks=30)


def test_single_stage_equals_sequential():
    assert "bit-identical" in check_degenerate(layers=2, ticks=30)


def test_parallel_forwards_match_serial_forwards(spiral):
    stream = _stream(spiral)
    p = StagePartition.per_layer(3)
    serial = _pipeline("stash", [2, 8, 8, 3], p, stream, capture_trajectory=True)
    threaded = _pipeline("stash", [2, 8, 8, 3], p, stream, parallel=True, capture_trajectory=True)
    for x, y in zip(serial.trajectory, threaded.trajectory):
        assert all(np.array_equal(u, v) for u, v in zip(x, y))


def test_latest_departs_from_stash_after_first_delayed_update(spiral):
    stream = _stream(spiral)[:6]
    p = StagePartition.per_layer(3)
    stash = _pipeline("stash", [2, 8, 8, 3], p, stream, capture_trajectory=True)
    latest = _pipeline("latest", [2, 8, 8, 3], p, stream, capture_trajectory=True)
    # microbatch 0 sees version 0 everywhere; from microbatch 1 on, latest propagates through
    # a newer layer-1 weight than the one its forward used
    assert all(np.array_equal(u, v) for u, v in zip(stash.trajectory[0], latest.trajectory[0]))
    assert not np.array_equal(stash.trajectory[1][0], latest.trajectory[1][0])


def test_storage_peaks_per_layer(spiral):
    stream = _stream(spiral)
    p = StagePartition.per_layer(4)
    stash = _pipeline("stash", [2, 4, 4, 4, 3], p, stream)
    assert stash.peak_weight_copies == [7, 5, 3, 0]
    assert stash.peak_activation_slots == [8, 6, 4, 1]
    assert stash.accumulators == 0
    assert stash.peak_weight_bytes > 0
    ema = _pipeline("ema-pipeline", [2, 4, 4, 4, 3], p, stream)
    assert sum(ema.peak_weight_copies) == 0
    assert ema.accumulators == 3
    assert ema.peak_weight_bytes == 0


def test_epoch_records_and_csv(spiral, tmp_path):
    stream = _stream(spiral, epochs=3)
    metrics = _pipeline("latest", [2, 8, 3], StagePartition.per_layer(2), stream, spiral)
    assert [r.epoch for r in metrics.records] == [0, 1, 2]
    assert all(r.strategy == "latest" for r in metrics.records)
    assert metrics.ticks == len(stream) + 3
    path = tmp_path / "latest.csv"
    metrics.write_csv(path)
    assert path.read_text().splitlines()[0] == ",".join(CSV_COLUMNS)
    assert read_metrics_csv(path) == metrics.records
    summary = metrics.summary()
    assert summary["final_test_acc"] == metrics.records[-1].test_acc
    assert summary["accumulators"] == 0


def test_update_log_rebuilds_forward_weights(spiral):
    stream = _stream(spiral)[:20]
    p = StagePartition.per_layer(2)
    a = derive_delays(2, p)
    log = UpdateLog(2)
    executor = PipelineExecutor(
        init_mlp([2, 4, 3], 0), PipelineSchedule(p, a, len(stream)), stream,
        make_provider(StrategySpec.parse("stash"), a), SgdConfig(lr=0.05),
        capture_trajectory=True, update_log=log,
    )
    metrics = executor.run()
    t, k = len(stream), a.staleness(0)
    rebuilt = exact_history_oracle(executor.model.layers[0].W, log.window(0, t, k), t, k)
    # trajectory[m] holds version m + 1
    np.testing.assert_allclose(rebuilt, metrics.trajectory[t - k - 1][0], atol=1e-12)


def test_divergence_is_reported_with_strategy():
    stream = make_microbatches(np.full((32, 2), np.nan), np.zeros(32, dtype=np.int64), 8, 1, seed=0)
    p = StagePartition.per_layer(2)
    a = derive_delays(2, p)
    with pytest.raises(TrainingDivergedError) as info:
        run_pipeline(
            init_mlp([2, 8, 3], 0), PipelineSchedule(p, a, len(stream)), stream,
            make_provider(StrategySpec.parse("latest"), a), SgdConfig(), label="latest",
        )
    assert info.value.strategy == "latest"


def test_sequential_learns_spiral(spiral):
    stream = _stream(spiral, epochs=5)
    metrics = run_sequential(init_mlp([2, 32, 3], 0), stream, SgdConfig(lr=0.1), spiral)
    assert len(metrics.records) == 5
    assert metrics.records[-1].loss < metrics.records[0].loss


def test_executor_rejects_mismatched_model(spiral):
    stream = _stream(spiral)
    p = StagePartition.per_layer(3)
    a = derive_delays(3, p)
    with pytest.raises(PartitionError):
        PipelineExecutor(init_mlp([2, 3], 0), PipelineSchedule(p, a, len(stream)), stream, make_provider(StrategySpec(WeightStrategy.LATEST), a), SgdConfig())


class _RecordingStash(ExactStashProvider):
    def __init__(self, staleness):
        super().__init__(staleness)
        self.seen = {l: set() for l in range(len(staleness))}

    def provide(self, layer, t, k, live, lr):
        self.seen[layer].add(k)
        return super().provide(layer, t, k, live, lr)


def test_backward_receives_the_planned_staleness(spiral):
    stream = _stream(spiral)
    p = StagePartition.per_layer(3)
    a = derive_delays(3, p)
    provider = _RecordingStash([a.staleness(l) for l in range(3)])
    run_pipeline(init_mlp([2, 8, 8, 3], 0), PipelineSchedule(p, a, len(stream)), stream, provider, SgdConfig(lr=0.05))
    assert provider.seen == {0: {5}, 1: {3}, 2: {0}}
    assert provider.peak_copies() == [5, 3, 0]


def test_cosine_schedule_past_its_horizon_does_not_diverge(spiral):
    stream = _stream(spiral, epochs=3)
    p = StagePartition.per_layer(3)
    a = derive_delays(3, p)
    cfg = SgdConfig(lr=0.05, momentum=0.9, lr_schedule="cosine", t_max=20)
    provider = make_provider(StrategySpec.parse("ema-pipeline"), a, accumulate="update")
    metrics = run_pipeline(init_mlp([2, 8, 8, 3], 0), PipelineSchedule(p, a, len(stream)), stream, provider, cfg, spiral)
    assert len(metrics.records) == 3
    assert all(np.isfinite(r.loss) for r in metrics.records)
    assert all(np.isfinite(avg.mean).all() for avg in provider.averagers.values())


def test_delayed_serial_two_layer_hand_unroll():
    xs, ys = [0.5, -1.0, 2.0, 1.5, -0.5], [0, 1, 0, 1, 1]
    stream = [Microbatch(i, 0, np.array([[x]]), np.array([y])) for i, (x, y) in enumerate(zip(xs, ys))]
    model = Mlp([
        Layer(np.array([[0.8]]), np.array([0.1]), "identity"),
        Layer(np.array([[1.0], [-0.5]]), np.array([0.0, 0.2]), "identity"),
    ])
    a = derive_delays(2, StagePartition.per_layer(2))
    assert a.gradient_delay == (2, 0)
    lr = 0.1
    metrics = run_delayed_serial(model, a, stream, SgdConfig(lr=lr), capture_trajectory=True)

    # layer 0 runs on w0 from three updates back, layer 1 on its live weights
    w0, c0 = [0.8], [0.1]
    u, v = np.array([1.0, -0.5]), np.array([0.0, 0.2])
    for m, (x, y) in enumerate(zip(xs, ys)):
        h = w0[max(0, m - 3)] * x + c0[max(0, m - 3)]
        logits = u * h + v
        p = np.exp(logits - logits.max())
        p = p / p.sum()
        p[y] -= 1.0
        dh = float(p @ u)
        w0.append(w0[-1] - lr * dh * x)
        c0.append(c0[-1] - lr * dh)
        u, v = u - lr * p * h, v - lr * p
        got = metrics.trajectory[m]
        assert got[0][0, 0] == pytest.approx(w0[-1], abs=1e-12)
        np.testing.assert_allclose(got[1][:, 0], u, atol=1e-12)
    assert len(metrics.trajectory) == 5


def test_sequential_separates_blobs_in_200_steps():
    data = generate_blobs(2, 500, 0.5, seed=0)
    stream = make_microbatches(data.x_train, data.y_train, 16, 8, seed=0)
    assert len(stream) == 200
    model = init_mlp([2, 8, 2], 0)
    metrics = run_sequential(model, stream, SgdConfig(lr=0.1), data)
    assert accuracy(model, data.x_test, data.y_test) >= 0.99
    assert metrics.records[-1].test_acc >= 0.99


def test_sequential_replays_identically(spiral):
    stream = _stream(spiral)
    first = run_sequential(init_mlp([2, 8, 3], 0), stream, SgdConfig(lr=0.1), spiral)
    second = run_sequential(init_mlp([2, 8, 3], 0), stream, SgdConfig(lr=0.1), spiral)
    assert first.records == second.records
