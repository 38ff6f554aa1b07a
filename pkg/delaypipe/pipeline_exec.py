"""
Deterministic pipelined training executor.

Time advances in ticks. On tick tau stage s runs the forward of microbatch
tau - s and the backward of microbatch tau - s - k_s, then applies that
backward's update. k_s = 2S(s) + 1 is the round-trip staleness of the stage
(0 for the output stage), so the forward of a microbatch at layer l sees
weights exactly staleness(l) updates older than the ones its gradient is
applied to. Gradients cross a stage boundary one tick after they are produced
(two at the output boundary) and wait in a per-stage buffer.

Next to the executor live two references that share its numerics:
``run_delayed_serial`` applies the same delayed gradients without any
pipeline machinery and ``run_sequential`` is plain minibatch SGD.
"""

import csv
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from delaypipe.datasets import Dataset
from delaypipe.delay_planner import DelayAssignment
from delaypipe.errors import PartitionError, StashError, TrainingDivergedError
from delaypipe.nn_core import ForwardCache, Layer, LayerGrads, Mlp, SgdConfig, Tensor, accuracy, backward, forward, sgd_step, softmax_ce
from delaypipe.retimer import StagePartition
from delaypipe.weight_provider import UpdateLog, WeightProvider

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("tick", "epoch", "strategy", "loss", "train_acc", "test_acc", "stashed_weight_bytes", "stashed_act_bytes")


class Phase(str, Enum):
    FORWARD = "fwd"
    BACKWARD = "bwd"
    UPDATE = "update"


@dataclass(frozen=True)
class TickEvent:
    stage: int
    phase: Phase
    microbatch: int


@dataclass
class TrainTick:
    tick: int
    events: List[TickEvent] = field(default_factory=list)


@dataclass(frozen=True)
class Microbatch:
    index: int
    epoch: int
    x: Tensor
    y: Tensor


def make_microbatches(x: Tensor, y: Tensor, batch_size: int, epochs: int, seed: int) -> List[Microbatch]:
    """Shuffled minibatches for every epoch, in the order they enter the pipeline."""
    if batch_size < 1 or epochs < 0:
        raise ValueError(f"Need batch_size >= 1 and epochs >= 0, got {batch_size} and {epochs}")
    rng = np.random.default_rng(seed)
    stream = []
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            stream.append(Microbatch(len(stream), epoch, x[idx], y[idx]))
    return stream


class PipelineSchedule:
    """Slot table for M microbatches on a stage partition.

    Stage s runs the forward of microbatch m on tick m + s and its backward
    on tick m + s + k_s, where k_s is the staleness of the stage's layers. The
    stage applies the resulting update on that same tick.
    """

    def __init__(self, partition: StagePartition, assignment: DelayAssignment, num_microbatches: int):
        if assignment.num_layers != partition.num_layers:
            raise PartitionError(f"Assignment covers {assignment.num_layers} layers, partition {partition.num_layers}")
        for l in range(partition.num_layers):
            if assignment.stages_after(l) != partition.stages_after(l):
                raise PartitionError(f"Assignment does not match partition {partition} at layer {l}")
        self.partition = partition
        self.assignment = assignment
        self.num_microbatches = num_microbatches
        self.stage_staleness = [assignment.staleness(partition.stage_layers(s)[0]) for s in range(partition.num_stages)]

    @property
    def num_stages(self) -> int:
        return self.partition.num_stages

    @property
    def num_ticks(self) -> int:
        if not self.num_microbatches:
            return 0
        return self.num_microbatches + max(s + k for s, k in enumerate(self.stage_staleness))

    def forward_tick(self, microbatch: int, stage: int) -> int:
        return microbatch + stage

    def backward_tick(self, microbatch: int, stage: int) -> int:
        return microbatch + stage + self.stage_staleness[stage]

    def forward_microbatch(self, stage: int, tick: int) -> Optional[int]:
        m = tick - stage
        return m if 0 <= m < self.num_microbatches else None

    def backward_microbatch(self, stage: int, tick: int) -> Optional[int]:
        m = tick - stage - self.stage_staleness[stage]
        return m if 0 <= m < self.num_microbatches else None

    def ticks(self) -> Iterator[TrainTick]:
        """Forwards input-most first, then backwards output-most first, then updates."""
        n = self.num_stages
        for tau in range(self.num_ticks):
            tick = TrainTick(tau)
            for s in range(n):
                m = self.forward_microbatch(s, tau)
                if m is not None:
                    tick.events.append(TickEvent(s, Phase.FORWARD, m))
            backwards = [(s, m) for s in reversed(range(n)) if (m := self.backward_microbatch(s, tau)) is not None]
            tick.events += [TickEvent(s, Phase.BACKWARD, m) for s, m in backwards]
            tick.events += [TickEvent(s, Phase.UPDATE, m) for s, m in reversed(backwards)]
            yield tick


def build_slot_table(partition: StagePartition, assignment: DelayAssignment, num_microbatches: int) -> List[TrainTick]:
    return list(PipelineSchedule(partition, assignment, num_microbatches).ticks())


class ActivationStash:
    """Per-layer forward caches waiting for their backward pass."""

    def __init__(self, capacities: Sequence[int]):
        self.capacities = list(capacities)
        self._slots: List["OrderedDict[int, ForwardCache]"] = [OrderedDict() for _ in self.capacities]
        self.peak = [0] * len(self.capacities)

    def push(self, layer: int, microbatch: int, cache: ForwardCache) -> None:
        slots = self._slots[layer]
        if microbatch in slots:
            raise StashError(f"Layer {layer}: microbatch {microbatch} stashed twice")
        if len(slots) >= self.capacities[layer]:
            raise StashError(f"Layer {layer}: activation stash overflow (capacity {self.capacities[layer]})")
        slots[microbatch] = cache
        self.peak[layer] = max(self.peak[layer], len(slots))

    def pop(self, layer: int, microbatch: int) -> ForwardCache:
        try:
            return self._slots[layer].pop(microbatch)
        except KeyError:
            raise StashError(f"Layer {layer}: no stashed activations for microbatch {microbatch}") from None

    def occupancy(self, layer: int) -> int:
        return len(self._slots[layer])

    def nbytes(self) -> int:
        return sum(c.x.nbytes + c.z.nbytes for slots in self._slots for c in slots.values())


@dataclass
class EpochRecord:
    tick: int
    epoch: int
    strategy: str
    loss: float
    train_acc: float
    test_acc: float
    stashed_weight_bytes: int
    stashed_act_bytes: int


@dataclass
class RunMetrics:
    strategy: str
    records: List[EpochRecord] = field(default_factory=list)
    ticks: int = 0
    peak_weight_copies: List[int] = field(default_factory=list)
    peak_activation_slots: List[int] = field(default_factory=list)
    peak_weight_bytes: int = 0
    peak_act_bytes: int = 0
    accumulators: int = 0
    trajectory: Optional[List[List[Tensor]]] = None

    @property
    def final_test_acc(self) -> float:
        return self.records[-1].test_acc if self.records else float("nan")

    @property
    def final_loss(self) -> float:
        return self.records[-1].loss if self.records else float("nan")

    def epochs_to_threshold(self, threshold: float) -> Optional[int]:
        for r in self.records:
            if r.test_acc >= threshold:
                return r.epoch + 1
        return None

    def summary(self, threshold: float = 0.9) -> Dict[str, Any]:
        return {
            "strategy": self.strategy,
            "ticks": self.ticks,
            "final_loss": self.final_loss,
            "final_test_acc": self.final_test_acc,
            "epochs_to_threshold": self.epochs_to_threshold(threshold),
            "peak_weight_copies": sum(self.peak_weight_copies),
            "peak_activation_slots": sum(self.peak_activation_slots),
            "peak_weight_bytes": self.peak_weight_bytes,
            "peak_act_bytes": self.peak_act_bytes,
            "accumulators": self.accumulators,
        }

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for r in self.records:
                row = asdict(r)
                writer.writerow([row[c] for c in CSV_COLUMNS])


def read_metrics_csv(path: Union[str, Path]) -> List[EpochRecord]:
    types = {f.name: f.type for f in fields(EpochRecord)}
    with open(path, newline="") as f:
        return [EpochRecord(**{k: types[k](v) for k, v in row.items()}) for row in csv.DictReader(f)]


class _EpochTracker:
    """Collects microbatch losses and emits one record per finished epoch."""

    def __init__(self, label: str, stream: Sequence[Microbatch], dataset: Optional[Dataset]):
        self.label = label
        self.stream = stream
        self.dataset = dataset
        self.losses: Dict[int, float] = {}
        self.records: List[EpochRecord] = []
        self.weight_bytes = 0
        self.act_bytes = 0

    def note_storage(self, weight_bytes: int, act_bytes: int) -> None:
        self.weight_bytes = max(self.weight_bytes, weight_bytes)
        self.act_bytes = max(self.act_bytes, act_bytes)

    def note_loss(self, microbatch: int, loss: float) -> None:
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"Non-finite loss on microbatch {microbatch}", self.label)
        self.losses[microbatch] = loss

    def closes_epoch(self, microbatch: int) -> bool:
        epoch = self.stream[microbatch].epoch
        return microbatch + 1 == len(self.stream) or self.stream[microbatch + 1].epoch != epoch

    def updated(self, microbatch: int, tick: int, model: Mlp) -> None:
        """Call after the update for ``microbatch``; closes the epoch on its last microbatch."""
        if not self.closes_epoch(microbatch):
            return
        epoch = self.stream[microbatch].epoch
        members = [m for m in sorted(self.losses) if self.stream[m].epoch == epoch]
        loss = sum(self.losses.pop(m) for m in members) / max(len(members), 1)
        if self.dataset is not None:
            train_acc = accuracy(model, self.dataset.x_train, self.dataset.y_train)
            test_acc = accuracy(model, self.dataset.x_test, self.dataset.y_test)
        else:
            train_acc = test_acc = float("nan")
        self.records.append(EpochRecord(tick, epoch, self.label, loss, train_acc, test_acc, self.weight_bytes, self.act_bytes))
        self.weight_bytes = self.act_bytes = 0


class PipelineExecutor:
    """Runs one model through a pipeline schedule with a weight provider.

    Each layer keeps its own version counter: the number of updates applied to
    it so far. A backward pass checks that the activations it consumes were
    produced ``staleness(l)`` versions ago before asking the provider for the
    matching weights.
    """

    def __init__(
        self,
        model: Mlp,
        schedule: PipelineSchedule,
        stream: Sequence[Microbatch],
        provider: WeightProvider,
        cfg: SgdConfig,
        dataset: Optional[Dataset] = None,
        label: Optional[str] = None,
        parallel: bool = False,
        capture_trajectory: bool = False,
        update_log: Optional[UpdateLog] = None,
    ):
        if model.num_layers != schedule.partition.num_layers:
            raise PartitionError(f"Model has {model.num_layers} layers, schedule covers {schedule.partition.num_layers}")
        if len(stream) != schedule.num_microbatches:
            raise PartitionError(f"Schedule expects {schedule.num_microbatches} microbatches, stream has {len(stream)}")
        self.model = model
        self.schedule = schedule
        self.stream = stream
        self.provider = provider
        self.cfg = cfg
        self.parallel = parallel
        self.update_log = update_log
        self.label = label or provider.strategy.value
        self.tracker = _EpochTracker(self.label, stream, dataset)
        self.trajectory: Optional[List[List[Tensor]]] = [] if capture_trajectory else None
        a = schedule.assignment
        self.staleness = [a.staleness(l) for l in range(model.num_layers)]
        self.activations = ActivationStash([a.activation_slots(l) for l in range(model.num_layers)])
        self.stage_layers = [list(schedule.partition.stage_layers(s)) for s in range(schedule.num_stages)]
        self.versions = [0] * model.num_layers
        self.boundary: List[Dict[int, Tensor]] = [{} for _ in range(schedule.num_stages)]
        self.grad_boundary: List[Dict[int, Tensor]] = [{} for _ in range(schedule.num_stages)]
        self.forward_version: Dict[Tuple[int, int], int] = {}
        self.output_grads: Dict[int, Tensor] = {}
        # microbatch -> per-layer state after its update, until every stage has applied it
        self.finished: Dict[int, List[Optional[Layer]]] = {}
        self.peak_weight_bytes = 0
        self.peak_act_bytes = 0
        self.logger = logging.getLogger("PipelineExecutor")

    def run(self) -> RunMetrics:
        n = self.schedule.num_stages
        self.logger.info(f"Running {len(self.stream)} microbatches on {n} stages with {self.label}, staleness {self.staleness}")
        pool = ThreadPoolExecutor(max_workers=n) if self.parallel and n > 1 else None
        try:
            for tick in self.schedule.ticks():
                forwards = [(e.stage, e.microbatch) for e in tick.events if e.phase is Phase.FORWARD]
                if pool is not None:
                    # map() re-raises the first worker exception; every stage finishes before any backward.
                    list(pool.map(lambda sm: self._forward_stage(*sm), forwards))
                else:
                    for s, m in forwards:
                        self._forward_stage(s, m)
                act_bytes = self.activations.nbytes()
                self.peak_act_bytes = max(self.peak_act_bytes, act_bytes)
                self.tracker.note_storage(0, act_bytes)
                grads: Dict[int, List[LayerGrads]] = {}
                for e in tick.events:
                    if e.phase is Phase.BACKWARD:
                        grads[e.stage] = self._backward_stage(e.stage, e.microbatch)
                    elif e.phase is Phase.UPDATE:
                        self._update_stage(e.stage, e.microbatch, grads.pop(e.stage), tick.tick)
        finally:
            if pool is not None:
                pool.shutdown()
        return RunMetrics(
            strategy=self.label,
            records=self.tracker.records,
            ticks=self.schedule.num_ticks,
            peak_weight_copies=self.provider.peak_copies(),
            peak_activation_slots=list(self.activations.peak),
            peak_weight_bytes=self.peak_weight_bytes,
            peak_act_bytes=self.peak_act_bytes,
            accumulators=self.provider.accumulators(),
            trajectory=self.trajectory,
        )

    def _forward_stage(self, stage: int, m: int) -> None:
        mb = self.stream[m]
        h = mb.x if stage == 0 else self.boundary[stage - 1].pop(m)
        for l in self.stage_layers[stage]:
            v = self.versions[l]
            self.provider.on_forward(l, v)
            self.forward_version[(m, l)] = v
            h, cache = forward(self.model.layers[l], h)
            self.activations.push(l, m, cache)
        if stage == self.schedule.num_stages - 1:
            loss, self.output_grads[m] = softmax_ce(h, mb.y)
            self.tracker.note_loss(m, loss)
        else:
            self.boundary[stage][m] = h

    def _backward_stage(self, stage: int, m: int) -> List[LayerGrads]:
        layers = self.model.layers
        if stage == self.schedule.num_stages - 1:
            d = self.output_grads.pop(m)
        else:
            d = self.grad_boundary[stage].pop(m)
        grads = []
        for l in reversed(self.stage_layers[stage]):
            t, k = self.versions[l], self.staleness[l]
            cache = self.activations.pop(l, m)
            v = self.forward_version.pop((m, l))
            if v != max(0, t - k):
                raise StashError(f"Layer {l}: microbatch {m} ran forward on version {v}, backward expects {max(0, t - k)}")
            W = self.provider.provide(l, t, k, layers[l].W, self.cfg.lr_at(t))
            g = backward(layers[l], cache, d, W)
            self.provider.release(l, v)
            grads.append(g)
            d = g.dX
        if stage > 0:
            self.grad_boundary[stage - 1][m] = d
        grads.reverse()
        return grads

    def _update_stage(self, stage: int, m: int, grads: List[LayerGrads], tick: int) -> None:
        layers = self.model.layers
        stage_layers = self.stage_layers[stage]
        for l in stage_layers:
            self.provider.before_update(l, self.versions[l], layers[l].W)
        weight_bytes = sum(self.provider.stashed_copies(l) * layer.W.nbytes for l, layer in enumerate(layers))
        self.peak_weight_bytes = max(self.peak_weight_bytes, weight_bytes)
        self.tracker.note_storage(weight_bytes, 0)
        for l, g in zip(stage_layers, grads):
            t = self.versions[l]
            if t != m:
                raise StashError(f"Layer {l}: update for microbatch {m} arrived at version {t}")
            try:
                _, update = sgd_step(layers[l], g, self.cfg, t)
            except TrainingDivergedError as e:
                raise TrainingDivergedError(f"{e} (layer {l}, microbatch {m})", self.label) from e
            self.provider.after_update(l, g, update, self.cfg.lr_at(t))
            if self.update_log is not None:
                self.update_log.record(l, t, update.dW)
            self.versions[l] += 1
        self._note_finished(stage, m, tick)

    def _note_finished(self, stage: int, m: int, tick: int) -> None:
        """Hand microbatch ``m`` to the trajectory and epoch tracker once every stage has applied it."""
        keep = self.trajectory is not None or self.tracker.closes_epoch(m)
        done = self.finished.setdefault(m, [None] * self.model.num_layers)
        for l in self.stage_layers[stage]:
            done[l] = self.model.layers[l].copy() if keep else self.model.layers[l]
        if any(layer is None for layer in done):
            return
        del self.finished[m]
        if self.trajectory is not None:
            self.trajectory.append([layer.W for layer in done])
        self.tracker.updated(m, tick, Mlp(done))


def run_pipeline(
    model: Mlp,
    schedule: PipelineSchedule,
    stream: Sequence[Microbatch],
    provider: WeightProvider,
    cfg: SgdConfig,
    dataset: Optional[Dataset] = None,
    **options: Any,
) -> RunMetrics:
    return PipelineExecutor(model, schedule, stream, provider, cfg, dataset, **options).run()


def run_delayed_serial(
    model: Mlp,
    assignment: DelayAssignment,
    stream: Sequence[Microbatch],
    cfg: SgdConfig,
    dataset: Optional[Dataset] = None,
    label: str = "delayed-serial",
    capture_trajectory: bool = False,
) -> RunMetrics:
    """Reference trajectory: microbatch m runs forward and backward on W_l(m - k_l) and updates W_l(m)."""
    layers = model.layers
    if assignment.num_layers != len(layers):
        raise PartitionError(f"Assignment covers {assignment.num_layers} layers, model has {len(layers)}")
    staleness = [assignment.staleness(l) for l in range(len(layers))]
    history: List[Dict[int, Tuple[Tensor, Tensor]]] = [{0: (layer.W, layer.b)} for layer in layers]
    tracker = _EpochTracker(label, stream, dataset)
    trajectory: Optional[List[List[Tensor]]] = [] if capture_trajectory else None

    for m, mb in enumerate(stream):
        h = mb.x
        caches = []
        for l, layer in enumerate(layers):
            W, b = history[l][max(0, m - staleness[l])]
            h, cache = forward(layer, h, W, b)
            caches.append(cache)
        loss, d = softmax_ce(h, mb.y)
        tracker.note_loss(m, loss)
        grads: List[Optional[LayerGrads]] = [None] * len(layers)
        for l in reversed(range(len(layers))):
            W, _ = history[l][max(0, m - staleness[l])]
            grads[l] = backward(layers[l], caches[l], d, W)
            d = grads[l].dX
        for l, layer in enumerate(layers):
            try:
                sgd_step(layer, grads[l], cfg, m)
            except TrainingDivergedError as e:
                raise TrainingDivergedError(f"{e} (layer {l})", label) from e
            history[l][m + 1] = (layer.W, layer.b)
            history[l].pop(m - staleness[l], None)
        if trajectory is not None:
            trajectory.append([layer.W.copy() for layer in layers])
        tracker.updated(m, m, model)
    return RunMetrics(strategy=label, records=tracker.records, ticks=len(stream), trajectory=trajectory)


def run_sequential(
    model: Mlp,
    stream: Sequence[Microbatch],
    cfg: SgdConfig,
    dataset: Optional[Dataset] = None,
    label: str = "sequential",
    capture_trajectory: bool = False,
) -> RunMetrics:
    """Plain minibatch SGD, no pipelining."""
    layers = model.layers
    tracker = _EpochTracker(label, stream, dataset)
    trajectory: Optional[List[List[Tensor]]] = [] if capture_trajectory else None
    for m, mb in enumerate(stream):
        h = mb.x
        caches = []
        for layer in layers:
            h, cache = forward(layer, h)
            caches.append(cache)
        loss, d = softmax_ce(h, mb.y)
        tracker.note_loss(m, loss)
        grads: List[Optional[LayerGrads]] = [None] * len(layers)
        for l in reversed(range(len(layers))):
            grads[l] = backward(layers[l], caches[l], d)
            d = grads[l].dX
        for l, layer in enumerate(layers):
            try:
                sgd_step(layer, grads[l], cfg, m)
            except TrainingDivergedError as e:
                raise TrainingDivergedError(f"{e} (layer {l})", label) from e
        if trajectory is not None:
            trajectory.append([layer.W.copy() for layer in layers])
        tracker.updated(m, m, model)
    return RunMetrics(strategy=label, records=tracker.records, ticks=len(stream), trajectory=trajectory)
