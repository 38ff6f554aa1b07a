"""
Mechanical derivation of pipelined backpropagation by retiming.

The derivation has four steps:

1. insert delays on the feedforward cutsets at the network input and output,
2. insert round-trip delays on every layer's gradient feedback edge,
3. retime the backward and forward cutsets of a stage region,
4. repeat step 3 stage by stage, leaving one delay at every stage boundary.

Grouped stages are retimed as one region, so every layer in a group ends up
with the same delays.
"""

import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple

from delaypipe.delay_planner import DelayAssignment
from delaypipe.errors import CompactionError, IllegalRetimingError, PartitionError
from delaypipe.graph_ir import ComputationGraph, EdgeTag, NodeKind, build_training_graph, find_feedforward_cutsets

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StagePartition:
    """Layers [boundaries[i], boundaries[i+1]) form stage i."""

    num_layers: int
    boundaries: Tuple[int, ...]

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise PartitionError(f"num_layers must be >= 1, got {self.num_layers}")
        b = self.boundaries
        if not b or b[0] != 0:
            raise PartitionError(f"Partition must start at layer 0, got {list(b)}")
        if any(x >= y for x, y in zip(b, b[1:])):
            raise PartitionError(f"Stage boundaries must be strictly increasing, got {list(b)}")
        if b[-1] >= self.num_layers:
            raise PartitionError(f"Stage boundary {b[-1]} out of range for {self.num_layers} layers")

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "StagePartition":
        if not sizes or any(s < 1 for s in sizes):
            raise PartitionError(f"Stage sizes must be positive, got {list(sizes)}")
        starts = tuple(itertools.accumulate([0] + list(sizes[:-1])))
        return cls(sum(sizes), starts)

    @classmethod
    def per_layer(cls, num_layers: int) -> "StagePartition":
        return cls(num_layers, tuple(range(num_layers)))

    @classmethod
    def single(cls, num_layers: int) -> "StagePartition":
        return cls(num_layers, (0,))

    @classmethod
    def parse(cls, text: str, num_layers: int) -> "StagePartition":
        """Accept 'per-layer', 'single', a stage count like '4x', or stage sizes like '2,1,1'."""
        text = text.strip()
        if text == "per-layer":
            return cls.per_layer(num_layers)
        if text == "single":
            return cls.single(num_layers)
        try:
            if text.endswith("x"):
                return cls.even(num_layers, int(text[:-1]))
            sizes = [int(s) for s in text.split(",") if s.strip()]
        except ValueError:
            raise PartitionError(f"Cannot parse partition '{text}'") from None
        partition = cls.from_sizes(sizes)
        if partition.num_layers != num_layers:
            raise PartitionError(f"Partition '{text}' covers {partition.num_layers} layers, network has {num_layers}")
        return partition

    @classmethod
    def even(cls, num_layers: int, num_stages: int) -> "StagePartition":
        if not 1 <= num_stages <= num_layers:
            raise PartitionError(f"Cannot split {num_layers} layers into {num_stages} stages")
        base, extra = divmod(num_layers, num_stages)
        return cls.from_sizes([base + (1 if i < extra else 0) for i in range(num_stages)])

    @property
    def num_stages(self) -> int:
        return len(self.boundaries)

    @property
    def sizes(self) -> Tuple[int, ...]:
        ends = self.boundaries[1:] + (self.num_layers,)
        return tuple(e - s for s, e in zip(self.boundaries, ends))

    def stage_of(self, layer: int) -> int:
        if not 0 <= layer < self.num_layers:
            raise PartitionError(f"Layer {layer} out of range")
        return sum(1 for b in self.boundaries if b <= layer) - 1

    def stages_after(self, layer: int) -> int:
        """S(l): number of stage boundaries strictly downstream of layer l."""
        return self.num_stages - 1 - self.stage_of(layer)

    def stage_layers(self, stage: int) -> range:
        ends = self.boundaries[1:] + (self.num_layers,)
        return range(self.boundaries[stage], ends[stage])

    def is_refinement_of(self, other: "StagePartition") -> bool:
        return self.num_layers == other.num_layers and set(other.boundaries) <= set(self.boundaries)

    def __str__(self) -> str:
        return ",".join(str(s) for s in self.sizes)


def all_partitions(num_layers: int) -> Iterator[StagePartition]:
    """Every partition of ``num_layers`` consecutive layers into stages."""
    for mask in itertools.product((False, True), repeat=num_layers - 1):
        cuts = tuple(l + 1 for l, cut in enumerate(mask) if cut)
        yield StagePartition(num_layers, (0,) + cuts)


class RetimingKind(str, Enum):
    INSERT_CUTSET_DELAY = "insert-cutset-delay"
    INSERT_FEEDBACK_DELAY = "insert-feedback-delay"
    RETIME_BACKWARD_CUTSET = "retime-backward-cutset"
    RETIME_FORWARD_CUTSET = "retime-forward-cutset"
    LEAVE_BOUNDARY_DELAY = "leave-boundary-delay"


@dataclass(frozen=True)
class RetimingStep:
    kind: RetimingKind
    changes: Tuple[Tuple[int, int], ...]
    delta: int
    region: Tuple[int, ...] = ()
    note: str = ""

    @property
    def edges(self) -> Tuple[int, ...]:
        return tuple(edge for edge, _ in self.changes)

    def describe(self, g: ComputationGraph) -> str:
        parts = []
        for edge_id, change in self.changes:
            e = g.edges[edge_id]
            parts.append(f"{g.nodes[e.src].name}->{g.nodes[e.dst].name} {change:+d}")
        region = f" layers={list(self.region)}" if self.region else ""
        note = f" ({self.note})" if self.note else ""
        return f"{self.kind.value}{region} delta={self.delta}{note}: " + (", ".join(parts) or "no change")


class RetimingTrace:
    """Ordered record of retiming steps, readable with ``explain()``."""

    def __init__(self):
        self.steps: List[RetimingStep] = []
        self._lines: List[str] = []
        self.logger = logging.getLogger("RetimingTrace")

    def record(self, step: RetimingStep, g: ComputationGraph) -> None:
        self.steps.append(step)
        line = step.describe(g)
        self._lines.append(line)
        self.logger.debug(line)

    def explain(self) -> str:
        return "\n".join(f"[{i:03d}] {line}" for i, line in enumerate(self._lines))

    def __len__(self) -> int:
        return len(self.steps)


def apply_step(g: ComputationGraph, step: RetimingStep) -> ComputationGraph:
    """Apply a step, refusing any change that leaves a negative delay."""
    totals: Dict[int, int] = {}
    for edge_id, change in step.changes:
        totals[edge_id] = totals.get(edge_id, 0) + change
    updates = {}
    for edge_id, change in totals.items():
        new = g.delay(edge_id) + change
        if new < 0:
            e = g.edges[edge_id]
            raise IllegalRetimingError(
                f"{step.kind.value}: edge {g.nodes[e.src].name}->{g.nodes[e.dst].name} "
                f"has {g.delay(edge_id)} delays, cannot remove {-change}"
            )
        updates[edge_id] = new
    return g.with_delays(updates)


def _check_partition(g: ComputationGraph, p: StagePartition) -> None:
    if p.num_layers != g.num_layers:
        raise PartitionError(f"Partition covers {p.num_layers} layers, graph has {g.num_layers}")


def _region_nodes(g: ComputationGraph, layers: Iterable[int], kinds: Tuple[NodeKind, ...]) -> FrozenSet[int]:
    layers = list(layers)
    for l in layers:
        if not 0 <= l < g.num_layers:
            raise PartitionError(f"Layer {l} out of range for {g.num_layers} layers")
    return frozenset(g.node_id(k, l) for l in layers for k in kinds)


def _region_step(g: ComputationGraph, region: FrozenSet[int], lag: int, kind: RetimingKind, layers: Tuple[int, ...], amount: int) -> RetimingStep:
    # Lag ``lag`` on every region node: inward edges gain it, outward edges lose it.
    changes = []
    for i, e in enumerate(g.edges):
        src_in, dst_in = e.src in region, e.dst in region
        if dst_in and not src_in:
            changes.append((i, lag))
        elif src_in and not dst_in:
            changes.append((i, -lag))
    return RetimingStep(kind, tuple(changes) if lag else (), amount, layers)


def backward_cutset_step(g: ComputationGraph, layers: Sequence[int], amount: int) -> RetimingStep:
    """Move ``amount`` delays from the outward to the inward edges of the region's backward domain."""
    region = _region_nodes(g, layers, (NodeKind.ACT_GRAD, NodeKind.WEIGHT_GRAD))
    return _region_step(g, region, amount, RetimingKind.RETIME_BACKWARD_CUTSET, tuple(layers), amount)


def forward_cutset_step(g: ComputationGraph, layers: Sequence[int], amount: int) -> RetimingStep:
    """Move ``amount`` delays from the inward to the outward edges of the region's forward domain."""
    region = _region_nodes(g, layers, (NodeKind.FORWARD, NodeKind.WEIGHT_UPDATE))
    return _region_step(g, region, -amount, RetimingKind.RETIME_FORWARD_CUTSET, tuple(layers), amount)


def retime_backward_cutset(g: ComputationGraph, layers: Sequence[int], amount: int, trace: Optional[RetimingTrace] = None) -> ComputationGraph:
    step = backward_cutset_step(g, layers, amount)
    result = apply_step(g, step)
    if trace is not None:
        trace.record(step, g)
    return result


def retime_forward_cutset(g: ComputationGraph, layers: Sequence[int], amount: int, trace: Optional[RetimingTrace] = None) -> ComputationGraph:
    step = forward_cutset_step(g, layers, amount)
    result = apply_step(g, step)
    if trace is not None:
        trace.record(step, g)
    return result


def insert_initial_delays(g: ComputationGraph, p: StagePartition, trace: Optional[RetimingTrace] = None) -> ComputationGraph:
    """Steps 1-2: n delays on each feedforward cutset, 2*S(l) on each grad-to-update edge."""
    _check_partition(g, p)
    n = p.num_stages - 1
    steps = []
    for cut in find_feedforward_cutsets(g):
        changes = tuple((edge_id, n) for edge_id in sorted(cut.edge_ids)) if n else ()
        steps.append(RetimingStep(RetimingKind.INSERT_CUTSET_DELAY, changes, n, note=cut.label))
    for l in range(g.num_layers):
        k = p.stages_after(l)
        changes = ((g.layer_edge(EdgeTag.GRAD_TO_UPDATE, l), 2 * k),) if k else ()
        steps.append(RetimingStep(RetimingKind.INSERT_FEEDBACK_DELAY, changes, 2 * k, (l,)))
    for step in steps:
        before = g
        g = apply_step(g, step)
        if trace is not None:
            trace.record(step, before)
    return g


def _boundary_edges(g: ComputationGraph, p: StagePartition, stage: int) -> Tuple[int, int]:
    """Forward-act and backward-delta edges between ``stage - 1`` and ``stage``."""
    first = p.boundaries[stage]
    return g.layer_edge(EdgeTag.FORWARD_ACT, first), g.layer_edge(EdgeTag.BACKWARD_DELTA, first - 1)


def compact(g: ComputationGraph, p: StagePartition, trace: Optional[RetimingTrace] = None) -> Tuple[ComputationGraph, DelayAssignment]:
    """Step 4: retime stage regions input-most first with shrinking amounts.

    Stage s moves S(s) delays through its backward and forward cutsets; the next
    stage then takes one fewer, so exactly one delay stays on every boundary.
    """
    _check_partition(g, p)
    for stage in range(p.num_stages):
        amount = p.num_stages - 1 - stage
        layers = list(p.stage_layers(stage))
        if amount:
            g = retime_backward_cutset(g, layers, amount, trace)
            g = retime_forward_cutset(g, layers, amount, trace)
        if stage > 0 and trace is not None:
            edges = _boundary_edges(g, p, stage)
            trace.record(RetimingStep(RetimingKind.LEAVE_BOUNDARY_DELAY, tuple((e, 0) for e in edges), 1, note=f"stage boundary {stage - 1}|{stage}"), g)

    residual = [l for l in range(g.num_layers) if g.delay(g.layer_edge(EdgeTag.GRAD_TO_UPDATE, l))]
    if residual:
        raise CompactionError(f"Delays left on grad-to-update edges of layers {residual} after {p.num_stages} iterations")
    for stage in range(1, p.num_stages):
        for edge_id in _boundary_edges(g, p, stage):
            if g.delay(edge_id) != 1:
                raise CompactionError(f"Stage boundary {stage - 1}|{stage} carries {g.delay(edge_id)} delays, expected 1")
    assignment = extract_assignment(g)
    logger.info(f"Compacted partition {p}: gradient delays {list(assignment.gradient_delay)}")
    return g, assignment


def extract_assignment(g: ComputationGraph) -> DelayAssignment:
    """Per-layer delays read off a graph.

    The gradient delay is the total delay on the layer's weight loop
    WeightUpdate -> ActGrad -> WeightGrad -> WeightUpdate, which retiming
    conserves. Stash depths are the act-to-grad/weight-to-grad delays in ticks
    (two delay slots per tick).
    """
    grad, weight, act = [], [], []
    for l in range(g.num_layers):
        a = g.node_id(NodeKind.ACT_GRAD, l)
        w_edge = g.layer_edge(EdgeTag.WEIGHT_TO_GRAD, l)
        a_edge = g.layer_edge(EdgeTag.ACT_TO_GRAD, l)
        loop = g.delay(w_edge) + g.delay(g.edge_id(a, g.node_id(NodeKind.WEIGHT_GRAD, l))) + g.delay(g.layer_edge(EdgeTag.GRAD_TO_UPDATE, l))
        grad.append(loop)
        weight.append(g.delay(w_edge) // 2)
        act.append(g.delay(a_edge) // 2)
    return DelayAssignment(tuple(grad), tuple(weight), tuple(act))


def derive_by_retiming(p: StagePartition, trace: Optional[RetimingTrace] = None) -> Tuple[ComputationGraph, DelayAssignment]:
    """Build, insert and compact in one call."""
    g = build_training_graph(p.num_layers)
    g = insert_initial_delays(g, p, trace)
    return compact(g, p, trace)

