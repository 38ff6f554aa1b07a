import pytest

from delaypipe.errors import GraphError, SimulationError
from delaypipe.graph_ir import (
    BUBBLE,
    ComputationGraph,
    Edge,
    EdgeTag,
    NodeKind,
    build_training_graph,
    find_feedforward_cutsets,
    identity_semantics,
    load_graph,
    random_semantics,
    save_graph,
    simulate,
)
from delaypipe.retimer import StagePartition, compact, insert_initial_delays


@pytest.mark.parametrize("num_layers", [1, 2, 3, 5])
def test_training_graph_shape(num_layers):
    g = build_training_graph(num_layers)
    g.validate()
    assert len(g.nodes) == 2 + 4 * num_layers
    # forward chain + inter-layer deltas + five edges owned by every layer
    assert len(g.edges) == (num_layers + 1) + (num_layers - 1) + 5 * num_layers
    assert all(d == 0 for d in g.delays())


def test_training_graph_rejects_empty_network():
    with pytest.raises(GraphError):
        build_training_graph(0)


def test_layer_edges_connect_expected_nodes():
    g = build_training_graph(3)
    e = g.edges[g.layer_edge(EdgeTag.BACKWARD_DELTA, 1)]
    assert (g.nodes[e.src].name, g.nodes[e.dst].name) == ("ActGrad(2)", "ActGrad(1)")
    e = g.edges[g.layer_edge(EdgeTag.FORWARD_ACT, 0)]
    assert g.nodes[e.src].kind is NodeKind.INPUT
    with pytest.raises(GraphError):
        g.layer_edge(EdgeTag.BACKWARD_DELTA, 2)


def test_every_cycle_crosses_one_weight_update():
    g = build_training_graph(3)
    updates = {g.node_id(NodeKind.WEIGHT_UPDATE, l) for l in range(3)}
    cycles = g.enumerate_cycles()
    assert cycles
    for cycle in cycles:
        assert sum(1 for i in cycle if g.edges[i].dst in updates) == 1


def test_validate_rejects_negative_delay():
    g = build_training_graph(2)
    edges = list(g.edges)
    e = edges[0]
    edges[0] = Edge(e.src, e.dst, -1, e.tag)
    with pytest.raises(GraphError, match="illegal delay"):
        ComputationGraph(2, g.nodes, tuple(edges)).validate()
    with pytest.raises(GraphError):
        g.with_delays({0: -1})


def test_validate_rejects_missing_node():
    g = build_training_graph(2)
    broken = ComputationGraph(2, g.nodes[:-1], tuple(e for e in g.edges if e.src < len(g.nodes) - 1 and e.dst < len(g.nodes) - 1))
    with pytest.raises(GraphError):
        broken.validate()


def test_feedforward_cutsets_are_the_network_boundaries():
    g = build_training_graph(4)
    cuts = find_feedforward_cutsets(g)
    assert [c.label for c in cuts] == ["input-boundary", "output-boundary"]
    for cut in cuts:
        assert cut.is_feedforward
        assert len(cut.edge_ids) == 1


def test_graph_json_round_trip(tmp_path):
    p = StagePartition.from_sizes([2, 1])
    g, _ = compact(insert_initial_delays(build_training_graph(3), p), p)
    path = tmp_path / "graph.json"
    save_graph(g, path)
    assert load_graph(path) == g


def test_load_graph_rejects_garbage(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(GraphError):
        load_graph(path)
    path.write_text('{"num_layers": 1, "nodes": [{"id": 0, "kind": "Nope"}], "edges": []}')
    with pytest.raises(GraphError):
        load_graph(path)


def test_simulate_unpipelined_graph_is_combinational():
    g = build_training_graph(2)
    stream = [3, 1, 4, 1, 5]
    assert simulate(g, stream, 5, identity_semantics(g)) == stream


def test_simulate_delays_output_by_forward_path_delay():
    p = StagePartition.per_layer(2)
    g = insert_initial_delays(build_training_graph(2), p)
    assert g.path_delay(g.forward_path()) == 2
    out = simulate(g, [7, 8, 9], 5, identity_semantics(g), initial_value=BUBBLE)
    assert out == [BUBBLE, BUBBLE, 7, 8, 9]


def test_simulate_emits_bubbles_after_stream_ends():
    g = build_training_graph(1)
    out = simulate(g, [1, 2], 4, identity_semantics(g))
    assert out[:2] == [1, 2]
    assert out[2:] == [BUBBLE, BUBBLE]


def test_simulate_register_state_advances():
    g = build_training_graph(1)
    semantics, initial = random_semantics(g, seed=3)
    first = simulate(g, [5, 5, 5], 3, semantics, 0, initial)
    # same input, evolving weight register: outputs are not all equal
    assert len(set(first)) > 1
    assert simulate(g, [5, 5, 5], 3, semantics, 0, initial) == first


def test_simulate_argument_errors():
    g = build_training_graph(1)
    with pytest.raises(SimulationError):
        simulate(g, [1], -1, identity_semantics(g))
    semantics = identity_semantics(g)
    semantics.pop(g.node_id(NodeKind.OUTPUT))
    with pytest.raises(SimulationError, match="Unbound"):
        simulate(g, [1], 1, semantics)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_delays_on_a_feedforward_cutset_shift_the_output(k):
    g = build_training_graph(3)
    stream = list(range(11, 31))
    for cut in find_feedforward_cutsets(g):
        delayed = g.with_delays({e: g.delay(e) + k for e in cut.edge_ids})
        for seed in range(5):
            semantics, initial = random_semantics(g, seed)
            base = simulate(g, stream, len(stream), semantics, BUBBLE, initial)
            out = simulate(delayed, stream, len(stream) + k, semantics, BUBBLE, initial)
            assert out[:k] == [BUBBLE] * k, cut.label
            assert out[k:] == base, cut.label
