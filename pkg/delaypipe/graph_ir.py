"""
Dataflow-graph representation of one training iteration.

Nodes are the forward, activation-gradient, weight-gradient and weight-update
computations of every layer plus the network Input and Output. Edges carry an
integer count of delay elements (one element = one pipeline slot). The module
also finds feedforward cutsets and runs a cycle-accurate simulation of a graph
under caller-supplied node semantics.
"""

import json
import logging
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from delaypipe.errors import GraphError, SimulationError

logger = logging.getLogger(__name__)

# Token carried by a delay element that has not seen a value yet.
BUBBLE = None


class NodeKind(str, Enum):
    INPUT = "Input"
    OUTPUT = "Output"
    FORWARD = "Forward"
    ACT_GRAD = "ActGrad"
    WEIGHT_GRAD = "WeightGrad"
    WEIGHT_UPDATE = "WeightUpdate"


LAYER_KINDS = (NodeKind.FORWARD, NodeKind.ACT_GRAD, NodeKind.WEIGHT_GRAD, NodeKind.WEIGHT_UPDATE)


class EdgeTag(str, Enum):
    FORWARD_ACT = "forward-act"
    BACKWARD_DELTA = "backward-delta"
    ACT_TO_GRAD = "act-to-grad"
    WEIGHT_TO_GRAD = "weight-to-grad"
    GRAD_TO_UPDATE = "grad-to-update"
    UPDATE_TO_WEIGHT = "update-to-weight"


class CutDirection(str, Enum):
    OUTWARD = "outward"
    INWARD = "inward"


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind
    layer: Optional[int] = None

    @property
    def name(self) -> str:
        if self.layer is None:
            return self.kind.value
        return f"{self.kind.value}({self.layer})"


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    delay: int
    tag: EdgeTag


@dataclass(frozen=True)
class Cutset:
    """Edges crossing a node partition, each marked relative to ``side``."""

    edge_ids: FrozenSet[int]
    directions: Mapping[int, CutDirection]
    side: FrozenSet[int]
    label: str = ""

    @property
    def is_feedforward(self) -> bool:
        return len(set(self.directions.values())) == 1


@dataclass(frozen=True)
class ComputationGraph:
    num_layers: int
    nodes: Tuple[Node, ...]
    edges: Tuple[Edge, ...]

    @cached_property
    def _node_index(self) -> Dict[Tuple[NodeKind, Optional[int]], int]:
        return {(n.kind, n.layer): n.id for n in self.nodes}

    @cached_property
    def _edge_index(self) -> Dict[Tuple[int, int], int]:
        return {(e.src, e.dst): i for i, e in enumerate(self.edges)}

    def node_id(self, kind: NodeKind, layer: Optional[int] = None) -> int:
        try:
            return self._node_index[(kind, layer)]
        except KeyError:
            raise GraphError(f"No node {kind.value} for layer {layer}") from None

    def edge_id(self, src: int, dst: int) -> int:
        try:
            return self._edge_index[(src, dst)]
        except KeyError:
            raise GraphError(f"No edge {src}->{dst}") from None

    def layer_edge(self, tag: EdgeTag, layer: int) -> int:
        """Edge of the given tag owned by ``layer`` (forward-act/backward-delta: the edge entering it)."""
        f = self.node_id(NodeKind.FORWARD, layer)
        a = self.node_id(NodeKind.ACT_GRAD, layer)
        g = self.node_id(NodeKind.WEIGHT_GRAD, layer)
        u = self.node_id(NodeKind.WEIGHT_UPDATE, layer)
        if tag is EdgeTag.ACT_TO_GRAD:
            return self.edge_id(f, a)
        if tag is EdgeTag.WEIGHT_TO_GRAD:
            return self.edge_id(u, a)
        if tag is EdgeTag.GRAD_TO_UPDATE:
            return self.edge_id(g, u)
        if tag is EdgeTag.UPDATE_TO_WEIGHT:
            return self.edge_id(u, f)
        if tag is EdgeTag.FORWARD_ACT:
            src = self.node_id(NodeKind.INPUT) if layer == 0 else self.node_id(NodeKind.FORWARD, layer - 1)
            return self.edge_id(src, f)
        if layer + 1 >= self.num_layers:
            raise GraphError(f"Layer {layer} receives no backward-delta edge")
        return self.edge_id(self.node_id(NodeKind.ACT_GRAD, layer + 1), a)

    def in_edges(self, node: int) -> List[int]:
        return [i for i, e in enumerate(self.edges) if e.dst == node]

    def out_edges(self, node: int) -> List[int]:
        return [i for i, e in enumerate(self.edges) if e.src == node]

    def delay(self, edge_id: int) -> int:
        return self.edges[edge_id].delay

    def delays(self) -> List[int]:
        return [e.delay for e in self.edges]

    def with_delays(self, updates: Mapping[int, int]) -> "ComputationGraph":
        """Return a copy with the given edge delays replaced."""
        edges = list(self.edges)
        for edge_id, delay in updates.items():
            if delay < 0:
                raise GraphError(f"Negative delay {delay} on edge {edge_id}")
            e = edges[edge_id]
            edges[edge_id] = Edge(e.src, e.dst, int(delay), e.tag)
        return ComputationGraph(self.num_layers, self.nodes, tuple(edges))

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        for n in self.nodes:
            graph.add_node(n.id, kind=n.kind, layer=n.layer)
        for i, e in enumerate(self.edges):
            graph.add_edge(e.src, e.dst, id=i, delay=e.delay, tag=e.tag)
        return graph

    def enumerate_cycles(self) -> List[List[int]]:
        """All simple directed cycles as lists of edge ids."""
        cycles = []
        for node_cycle in nx.simple_cycles(self.to_networkx()):
            hops = zip(node_cycle, node_cycle[1:] + node_cycle[:1])
            cycles.append([self.edge_id(u, v) for u, v in hops])
        return cycles

    def cycle_delay(self, cycle: Sequence[int]) -> int:
        return sum(self.edges[i].delay for i in cycle)

    def path_delay(self, node_path: Sequence[int]) -> int:
        return sum(self.delay(self.edge_id(u, v)) for u, v in zip(node_path, node_path[1:]))

    def forward_path(self) -> List[int]:
        """Input -> Forward(0) -> ... -> Output node ids."""
        path = [self.node_id(NodeKind.INPUT)]
        path += [self.node_id(NodeKind.FORWARD, l) for l in range(self.num_layers)]
        path.append(self.node_id(NodeKind.OUTPUT))
        return path

    def validate(self, check_cycles: bool = True) -> None:
        """Raise GraphError unless every structural invariant holds."""
        if self.num_layers < 1:
            raise GraphError("num_layers must be >= 1")
        for i, n in enumerate(self.nodes):
            if n.id != i:
                raise GraphError(f"Node ids must be dense; found {n.id} at position {i}")

        counts: Dict[Tuple[NodeKind, Optional[int]], int] = {}
        for n in self.nodes:
            if n.kind in (NodeKind.INPUT, NodeKind.OUTPUT):
                if n.layer is not None:
                    raise GraphError(f"{n.kind.value} node must not carry a layer id")
            elif n.layer is None or not 0 <= n.layer < self.num_layers:
                raise GraphError(f"{n.name} has layer id outside [0, {self.num_layers})")
            counts[(n.kind, n.layer)] = counts.get((n.kind, n.layer), 0) + 1
        expected = [(NodeKind.INPUT, None), (NodeKind.OUTPUT, None)]
        expected += [(k, l) for l in range(self.num_layers) for k in LAYER_KINDS]
        for key in expected:
            if counts.get(key, 0) != 1:
                raise GraphError(f"Expected exactly one {key[0].value} node for layer {key[1]}, found {counts.get(key, 0)}")
        if len(self.nodes) != len(expected):
            raise GraphError(f"Expected {len(expected)} nodes, found {len(self.nodes)}")

        seen = set()
        for i, e in enumerate(self.edges):
            if not (0 <= e.src < len(self.nodes) and 0 <= e.dst < len(self.nodes)):
                raise GraphError(f"Edge {i} references an unknown node")
            if not isinstance(e.delay, int) or e.delay < 0:
                raise GraphError(f"Edge {i} has illegal delay {e.delay!r}")
            if (e.src, e.dst) in seen:
                raise GraphError(f"Duplicate edge {e.src}->{e.dst}")
            seen.add((e.src, e.dst))

        for tag in (EdgeTag.FORWARD_ACT, EdgeTag.BACKWARD_DELTA):
            sub = nx.DiGraph([(e.src, e.dst) for e in self.edges if e.tag is tag])
            if not nx.is_directed_acyclic_graph(sub):
                raise GraphError(f"The {tag.value} subgraph contains a cycle")

        if check_cycles:
            updates = {n.id for n in self.nodes if n.kind is NodeKind.WEIGHT_UPDATE}
            for cycle in self.enumerate_cycles():
                through = sum(1 for i in cycle if self.edges[i].dst in updates)
                if through != 1:
                    names = " -> ".join(self.nodes[self.edges[i].src].name for i in cycle)
                    raise GraphError(f"Cycle {names} passes through {through} WeightUpdate nodes")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "num_layers": self.num_layers,
            "nodes": [{"id": n.id, "kind": n.kind.value, "layer": n.layer} for n in self.nodes],
            "edges": [{"src": e.src, "dst": e.dst, "delay": e.delay, "tag": e.tag.value} for e in self.edges],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ComputationGraph":
        try:
            nodes = tuple(Node(int(n["id"]), NodeKind(n["kind"]), n.get("layer")) for n in data["nodes"])
            edges = tuple(Edge(int(e["src"]), int(e["dst"]), int(e["delay"]), EdgeTag(e["tag"])) for e in data["edges"])
            return cls(int(data["num_layers"]), nodes, edges)
        except (KeyError, TypeError, ValueError) as e:
            raise GraphError(f"Malformed graph document: {e}") from e


def build_training_graph(num_layers: int) -> ComputationGraph:
    """Canonical unpipelined L-layer training graph, all delays zero."""
    if num_layers < 1:
        raise GraphError(f"num_layers must be >= 1, got {num_layers}")

    nodes = [Node(0, NodeKind.INPUT), Node(1, NodeKind.OUTPUT)]
    for l in range(num_layers):
        base = 2 + 4 * l
        nodes += [Node(base + k, kind, l) for k, kind in enumerate(LAYER_KINDS)]

    def fwd(l: int) -> int:
        return 2 + 4 * l

    edges = [Edge(0, fwd(0), 0, EdgeTag.FORWARD_ACT)]
    edges += [Edge(fwd(l), fwd(l + 1), 0, EdgeTag.FORWARD_ACT) for l in range(num_layers - 1)]
    edges.append(Edge(fwd(num_layers - 1), 1, 0, EdgeTag.FORWARD_ACT))
    for l in reversed(range(num_layers)):
        f, a, g, u = fwd(l), fwd(l) + 1, fwd(l) + 2, fwd(l) + 3
        if l + 1 < num_layers:
            edges.append(Edge(fwd(l + 1) + 1, a, 0, EdgeTag.BACKWARD_DELTA))
        edges += [
            Edge(f, a, 0, EdgeTag.ACT_TO_GRAD),
            Edge(u, a, 0, EdgeTag.WEIGHT_TO_GRAD),
            Edge(a, g, 0, EdgeTag.BACKWARD_DELTA),
            Edge(g, u, 0, EdgeTag.GRAD_TO_UPDATE),
            Edge(u, f, 0, EdgeTag.UPDATE_TO_WEIGHT),
        ]
    graph = ComputationGraph(num_layers, tuple(nodes), tuple(edges))
    logger.debug(f"Built training graph: {len(nodes)} nodes, {len(edges)} edges")
    return graph


def _cut(g: ComputationGraph, side: FrozenSet[int], label: str) -> Optional[Cutset]:
    crossing = {}
    for i, e in enumerate(g.edges):
        src_in, dst_in = e.src in side, e.dst in side
        if src_in != dst_in:
            crossing[i] = CutDirection.OUTWARD if src_in else CutDirection.INWARD
    rest = frozenset(n.id for n in g.nodes) - side
    if not crossing or not rest:
        return None
    graph = g.to_networkx()
    if not (nx.is_weakly_connected(graph.subgraph(side)) and nx.is_weakly_connected(graph.subgraph(rest))):
        return None
    return Cutset(frozenset(crossing), crossing, side, label)


def candidate_cuts(g: ComputationGraph) -> List[Cutset]:
    """Structural boundary cuts: every single node, and every layer-prefix boundary."""
    cuts = []
    input_id = g.node_id(NodeKind.INPUT)
    output_id = g.node_id(NodeKind.OUTPUT)
    for n in g.nodes:
        if n.id == input_id:
            label = "input-boundary"
        elif n.id == output_id:
            label = "output-boundary"
        else:
            label = f"node:{n.name}"
        cut = _cut(g, frozenset([n.id]), label)
        if cut is not None:
            cuts.append(cut)
    for j in range(g.num_layers - 1):
        side = {input_id} | {n.id for n in g.nodes if n.layer is not None and n.layer <= j}
        cut = _cut(g, frozenset(side), f"layer-boundary:{j}|{j + 1}")
        if cut is not None:
            cuts.append(cut)
    return cuts


def find_feedforward_cutsets(g: ComputationGraph) -> List[Cutset]:
    """Boundary cutsets whose edges all cross in the same direction."""
    found: List[Cutset] = []
    seen = set()
    for cut in candidate_cuts(g):
        if cut.is_feedforward and cut.edge_ids not in seen:
            seen.add(cut.edge_ids)
            found.append(cut)
    logger.debug(f"Feedforward cutsets: {[c.label for c in found]}")
    return found


NodeFn = Callable[..., Any]


def simulate(
    g: ComputationGraph,
    input_stream: Sequence[Any],
    steps: int,
    node_semantics: Mapping[int, NodeFn],
    initial_value: Any = 0,
    initial_state: Optional[Mapping[int, Any]] = None,
) -> List[Any]:
    """Cycle-accurate simulation; returns the Output node's value per step.

    Edge e read at step t yields its source's output at t - delay(e), or
    ``initial_value`` before that. Inputs reach a node ordered by edge id.
    WeightUpdate nodes are registers: they emit their state and fold their
    inputs into the next state via ``fn(state, *inputs)``. A BUBBLE input makes
    a node emit BUBBLE and leaves registers unchanged.
    """
    if steps < 0:
        raise SimulationError(f"steps must be nonnegative, got {steps}")
    input_id = g.node_id(NodeKind.INPUT)
    output_id = g.node_id(NodeKind.OUTPUT)
    missing = [n.name for n in g.nodes if n.id != input_id and n.id not in node_semantics]
    if missing:
        raise SimulationError(f"Unbound node semantics: {', '.join(missing)}")

    registers = {n.id for n in g.nodes if n.kind is NodeKind.WEIGHT_UPDATE}
    comb = nx.DiGraph()
    comb.add_nodes_from(n.id for n in g.nodes)
    comb.add_edges_from((e.src, e.dst) for e in g.edges if e.delay == 0 and e.dst not in registers)
    try:
        order = list(nx.lexicographical_topological_sort(comb))
    except nx.NetworkXUnfeasible:
        raise SimulationError("Graph has a delay-free feedback loop") from None

    inputs_of = {n.id: sorted(g.in_edges(n.id)) for n in g.nodes}
    history: Dict[int, List[Any]] = {n.id: [] for n in g.nodes}
    state = {r: (initial_state or {}).get(r, 0) for r in registers}

    def read(edge_id: int, t: int) -> Any:
        e = g.edges[edge_id]
        s = t - e.delay
        return history[e.src][s] if s >= 0 else initial_value

    outputs = []
    for t in range(steps):
        for v in order:
            if v == input_id:
                value = input_stream[t] if t < len(input_stream) else BUBBLE
                fn = node_semantics.get(v)
                if fn is not None and value is not BUBBLE:
                    value = fn(value)
            elif v in registers:
                value = state[v]
            else:
                args = [read(i, t) for i in inputs_of[v]]
                value = BUBBLE if any(a is BUBBLE for a in args) else node_semantics[v](*args)
            history[v].append(value)
        for r in registers:
            args = [read(i, t) for i in inputs_of[r]]
            if not any(a is BUBBLE for a in args):
                state[r] = node_semantics[r](state[r], *args)
        outputs.append(history[output_id][t])
    return outputs


def identity_semantics(g: ComputationGraph) -> Dict[int, NodeFn]:
    """Pass the first input through; registers hold their state."""
    semantics: Dict[int, NodeFn] = {}
    for n in g.nodes:
        if n.kind is NodeKind.INPUT:
            continue
        if n.kind is NodeKind.WEIGHT_UPDATE:
            semantics[n.id] = lambda state, *_: state
        else:
            semantics[n.id] = lambda *xs: xs[0]
    return semantics


def random_semantics(g: ComputationGraph, seed: int, modulus: int = 1_000_003) -> Tuple[Dict[int, NodeFn], Dict[int, int]]:
    """Random affine integer maps (mod ``modulus``) for every node, plus register initial states."""
    rng = np.random.default_rng(seed)
    semantics: Dict[int, NodeFn] = {}
    initial: Dict[int, int] = {}

    def affine(coeffs: List[int], bias: int) -> NodeFn:
        return lambda *xs: (sum(c * x for c, x in zip(coeffs, xs)) + bias) % modulus

    for n in g.nodes:
        if n.kind is NodeKind.INPUT:
            continue
        arity = len(g.in_edges(n.id))
        coeffs = [int(c) for c in rng.integers(1, modulus, size=arity + 1)]
        bias = int(rng.integers(0, modulus))
        if n.kind is NodeKind.WEIGHT_UPDATE:
            semantics[n.id] = affine(coeffs, bias)
            initial[n.id] = int(rng.integers(0, modulus))
        else:
            semantics[n.id] = affine(coeffs[:arity], bias)
    return semantics, initial


def save_graph(g: ComputationGraph, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=2) + "\n")


def load_graph(path: Union[str, Path]) -> ComputationGraph:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise GraphError(f"Graph file {path} is not valid JSON: {e}") from e
    return ComputationGraph.from_dict(data)
