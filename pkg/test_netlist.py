"""
ネットリスト解析・グラフ構築のテスト
"""
from pathlib import Path

import networkx as nx
import numpy as np
import pytest

from netlist import (
    NODE_KINDS,
    GraphError,
    NetlistError,
    build_graph,
    load_netlist,
    node_features,
    normalize_adjacency_matrix,
    normalized_adjacency,
    parameter_table,
    parse_netlist,
    to_dot,
)

HERE = Path(__file__).resolve().parent

TWO_NMOS = """
PORT a b g
DEVICE M1 NMOS n1 g a PARAM W=10 BOUNDS 1 100 STEP 1 PARAM F=2 BOUNDS 1 8 STEP 1
DEVICE M2 NMOS n1 g b PARAM W=10 BOUNDS 1 100 STEP 1 PARAM F=2 BOUNDS 1 8 STEP 1
"""

SUPPLY_ONLY = """
SUPPLY VDD vdd 1.0
SUPPLY GND gnd
DEVICE R1 RES vdd gnd PARAM R=10 BOUNDS 1 100 STEP 1
"""


def test_opamp_fixture_has_15_params():
    netlist = load_netlist(HERE / "netlists" / "opamp.net")
    assert netlist.n_params == 15
    assert len(netlist.devices) == 8
    graph = build_graph(netlist)
    names = [n.name for n in graph.nodes]
    assert names[-3:] == ["VDD", "GND", "VB1"]
    assert graph.n_nodes == 11


def test_rfpa_fixture_has_14_params():
    netlist = load_netlist(HERE / "netlists" / "rfpa.net")
    assert netlist.n_params == 14
    build_graph(netlist)


def test_two_nmos_sharing_net():
    netlist = parse_netlist(TWO_NMOS)
    assert len(netlist.devices) == 2
    assert netlist.n_params == 4
    # 2番目のスロットはフィンガー数
    assert [p.integer for p in netlist.params] == [False, True, False, True]
    graph = build_graph(netlist)
    np.testing.assert_array_equal(graph.adjacency, [[0, 1], [1, 0]])
    assert graph.param_index == {(0, 0): 0, (0, 1): 1, (1, 0): 2, (1, 1): 3}


def test_device_on_supplies_only():
    graph = build_graph(parse_netlist(SUPPLY_ONLY))
    assert graph.n_nodes == 3
    np.testing.assert_array_equal(graph.adjacency, [[0, 1, 1], [1, 0, 0], [1, 0, 0]])


def test_comments_and_blank_lines_are_ignored():
    netlist = parse_netlist("# header\n\n" + SUPPLY_ONLY + "   # trailing\n")
    assert netlist.n_params == 1


@pytest.mark.parametrize("text, message", [
    ("", "no devices"),
    ("# only a comment\n", "no devices"),
    ("DEVICE X1 DIODE a b PARAM W=1 BOUNDS 0 2 STEP 1", "unknown device kind"),
    ("PORT a b\nDEVICE R1 RES a b PARAM R=5 BOUNDS 10 1 STEP 1", "bound min >= max"),
    ("PORT a b\nDEVICE R1 RES a b PARAM R=5 BOUNDS 1 10 STEP 1\n"
     "DEVICE R1 RES a b PARAM R=5 BOUNDS 1 10 STEP 1", "duplicate device name"),
    ("PORT a b\nDEVICE M1 NMOS a b PARAM W=5 BOUNDS 1 10 STEP 1", "exactly 2 PARAM"),
    ("PORT a b\nDEVICE R1 RES a b PARAM R=5 BOUNDS 1 10", "expected 'PARAM"),
    ("PORT a b\nDEVICE M1 NMOS a b PARAM W=5 BOUNDS 1 10 STEP 1 PARAM F=1.5 BOUNDS 1 4 STEP 1",
     "finger count"),
    ("FOO bar", "unknown statement"),
])
def test_parse_errors(text, message):
    with pytest.raises(NetlistError, match=message):
        parse_netlist(text)


def test_error_carries_line_number():
    text = "PORT a b\n\nDEVICE R1 RES a b PARAM R=x BOUNDS 1 10 STEP 1\n"
    with pytest.raises(NetlistError) as info:
        parse_netlist(text)
    assert info.value.line == 3
    assert str(info.value).startswith("line 3:")


def test_dangling_net_is_graph_error():
    text = "DEVICE R1 RES a b PARAM R=5 BOUNDS 1 10 STEP 1\n"
    with pytest.raises(GraphError, match="undeclared net"):
        build_graph(parse_netlist(text))


def test_node_features_rows():
    graph = build_graph(parse_netlist(SUPPLY_ONLY))
    X = node_features(graph, np.array([10.0]))
    assert X.shape == (3, len(NODE_KINDS) + 2)
    n_kinds = len(NODE_KINDS)
    # R1: RESのone-hot、log正規化で 10 → 0.5
    assert X[0, NODE_KINDS.index("RES")] == 1.0
    assert X[0, n_kinds] == pytest.approx(0.5)
    assert X[0, n_kinds + 1] == 0.0
    # VDDは電圧 1.0 / 最大 1.0、GNDは0
    assert X[1, NODE_KINDS.index("SUPPLY")] == 1.0
    assert X[1, n_kinds] == pytest.approx(1.0)
    assert X[2, NODE_KINDS.index("GND")] == 1.0
    assert X[2, n_kinds] == 0.0


def test_nmos_feature_row_and_lower_bounds():
    graph = build_graph(parse_netlist(TWO_NMOS))
    X = node_features(graph, np.array([1.0, 1.0, 1.0, 1.0]))
    n_kinds = len(NODE_KINDS)
    expected = np.zeros(n_kinds + 2)
    expected[NODE_KINDS.index("NMOS")] = 1.0
    np.testing.assert_array_equal(X[0], expected)
    X = node_features(graph, np.array([100.0, 8.0, 50.5, 4.5]))
    np.testing.assert_allclose(X[:, n_kinds:], [[1.0, 1.0], [0.5, 0.5]])


def test_node_features_rejects_wrong_length():
    graph = build_graph(parse_netlist(TWO_NMOS))
    with pytest.raises(ValueError):
        node_features(graph, np.zeros(3))


def test_supply_voltage_override():
    graph = build_graph(parse_netlist(SUPPLY_ONLY))
    X = node_features(graph, np.array([10.0]), {"VDD": 2.0})
    assert X[1, len(NODE_KINDS)] == pytest.approx(1.0)


def test_normalized_adjacency_hand_cases():
    np.testing.assert_allclose(normalize_adjacency_matrix(np.zeros((1, 1))), [[1.0]])
    np.testing.assert_allclose(normalize_adjacency_matrix(np.array([[0, 1], [1, 0]])),
                               [[0.5, 0.5], [0.5, 0.5]])
    path = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    a_star = normalize_adjacency_matrix(path)
    assert a_star[0, 1] == pytest.approx(1 / np.sqrt(6), abs=1e-12)
    assert a_star[1, 1] == pytest.approx(1 / 3, abs=1e-12)


def test_normalized_adjacency_is_symmetric_with_bounded_spectrum():
    graph = build_graph(load_netlist(HERE / "netlists" / "opamp.net"))
    a_star = normalized_adjacency(graph)
    np.testing.assert_allclose(a_star, a_star.T, atol=1e-12)
    eig = np.linalg.eigvalsh(a_star)
    assert eig.max() <= 1.0 + 1e-9
    assert eig.min() >= -1.0 - 1e-9


def test_adjacency_matches_networkx():
    graph = build_graph(load_netlist(HERE / "netlists" / "rfpa.net"))
    np.testing.assert_array_equal(graph.adjacency, graph.adjacency.T)
    assert np.all(np.diag(graph.adjacency) == 0)
    assert int(graph.adjacency.sum()) == 2 * graph.graph.number_of_edges()
    assert nx.is_connected(graph.graph)


def test_parameter_table_and_dot():
    netlist = parse_netlist(TWO_NMOS)
    rows = parameter_table(netlist)
    assert [r["param"] for r in rows] == ["W", "F", "W", "F"]
    assert rows[1]["integer"] is True
    dot = to_dot(build_graph(netlist))
    assert dot.startswith("graph circuit {")
    assert "n0 -- n1;" in dot


@pytest.mark.parametrize("name", ["opamp.net", "rfpa.net"])
def test_repeated_parses_are_byte_identical(name):
    text = (HERE / "netlists" / name).read_text(encoding="utf-8")
    graphs = [build_graph(parse_netlist(text)) for _ in range(3)]
    params = np.array([p.init for p in graphs[0].netlist.params])
    first = graphs[0]
    for graph in graphs[1:]:
        assert [(n.name, n.kind) for n in graph.nodes] == [(n.name, n.kind) for n in first.nodes]
        assert node_features(graph, params).tobytes() == node_features(first, params).tobytes()
        assert normalized_adjacency(graph).tobytes() == normalized_adjacency(first).tobytes()
        assert graph.param_index == first.param_index


@pytest.mark.parametrize("name", ["opamp.net", "rfpa.net"])
def test_param_index_is_a_bijection(name):
    graph = build_graph(load_netlist(HERE / "netlists" / name))
    m = graph.netlist.n_params
    assert sorted(graph.param_index.values()) == list(range(m))
    for (node, slot), g in graph.param_index.items():
        assert graph.nodes[node].param_slots[slot] == g
