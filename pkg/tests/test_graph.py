import numpy as np
import pytest

from graphprompt.errors import FormatError, IngestionError
from graphprompt.graph import (
    Graph, GraphCollection, SyntheticSpec, generate_synthetic, load_tu_dataset, write_tu_dataset,
)

from conftest import random_graph


def _write(directory, name, files: dict):
    for key, text in files.items():
        (directory / f"{name}_{key}.txt").write_text(text)


@pytest.fixture
def tiny_tu(tmp_path):
    # graph 1: triangle on nodes 1-3, graph 2: path 4-5
    _write(tmp_path, "TINY", {
        "A": "1, 2\n2, 1\n2, 3\n3, 2\n1, 3\n3, 1\n4, 5\n5, 4\n",
        "graph_indicator": "1\n1\n1\n2\n2\n",
        "graph_labels": "3\n-1\n",
        "node_labels": "2\n0\n2\n0\n5\n",
    })
    return tmp_path


def test_from_edges_canonicalises():
    g = Graph.from_edges(4, [(1, 0), (0, 1), (2, 2), (3, 1), (1, 3), (0, 1)])
    assert g.num_edges == 2
    assert g.neighbors(1).tolist() == [0, 3]
    assert g.neighbors(2).tolist() == []
    for v in range(4):
        nb = g.neighbors(v)
        assert np.all(np.diff(nb) > 0)
        assert v not in nb
        assert all(g.has_edge(int(u), v) for u in nb)


def test_from_edges_rejects_out_of_range():
    with pytest.raises(ValueError):
        Graph.from_edges(2, [(0, 2)])


def test_tiny_fixture_loads(tiny_tu):
    coll = load_tu_dataset(tiny_tu, "TINY")
    assert len(coll) == 2
    assert [g.num_nodes for g in coll] == [3, 2]
    assert [g.num_edges for g in coll] == [3, 1]
    # labels remapped to contiguous ids: graph labels {-1, 3} -> {0, 1}, node labels {0,2,5} -> {0,1,2}
    assert [g.graph_label for g in coll] == [1, 0]
    assert coll.graph_class_count == 2 and coll.node_class_count == 3
    assert coll[0].node_labels.tolist() == [1, 0, 1]
    # no attributes file: one-hot of node labels
    assert coll.feature_dim == 3
    assert coll[1].features.tolist() == [[1, 0, 0], [0, 0, 1]]


def test_tolerates_whitespace_self_loops_and_duplicates(tmp_path):
    _write(tmp_path, "W", {
        "A": "1 ,2\n  2,1\n1,1\n1, 2\n",
        "graph_indicator": "1\n1\n",
        "graph_labels": "0\n",
    })
    coll = load_tu_dataset(tmp_path, "W")
    assert coll[0].num_edges == 1
    assert coll.feature_dim == 1
    assert coll[0].features.tolist() == [[1.0], [1.0]]


def test_attributes_take_precedence(tmp_path):
    _write(tmp_path, "AT", {
        "A": "1, 2\n",
        "graph_indicator": "1\n1\n",
        "graph_labels": "1\n",
        "node_labels": "0\n1\n",
        "node_attributes": "0.5, 1.5\n-2.0 , 3.25\n",
    })
    coll = load_tu_dataset(tmp_path, "AT")
    assert coll.feature_dim == 2
    assert coll[0].features.tolist() == [[0.5, 1.5], [-2.0, 3.25]]


@pytest.mark.parametrize("missing", ["A", "graph_indicator", "graph_labels"])
def test_missing_mandatory_file_named(tiny_tu, missing):
    (tiny_tu / f"TINY_{missing}.txt").unlink()
    with pytest.raises(IngestionError, match=f"TINY_{missing}.txt"):
        load_tu_dataset(tiny_tu, "TINY")


def test_nonexistent_node_reports_line(tiny_tu):
    (tiny_tu / "TINY_A.txt").write_text("1, 2\n2, 9\n")
    with pytest.raises(FormatError, match=r"TINY_A.txt:2"):
        load_tu_dataset(tiny_tu, "TINY")


def test_node_in_two_graphs_is_format_error(tiny_tu):
    (tiny_tu / "TINY_A.txt").write_text("1, 2\n3, 4\n")
    with pytest.raises(FormatError, match="two graphs"):
        load_tu_dataset(tiny_tu, "TINY")


def _canonical(g: Graph):
    return g.csr_offsets.tolist(), g.csr_targets.tolist(), g.features.tolist()


def test_round_trip(tmp_path):
    spec = SyntheticSpec(num_graphs=5, nodes_per_graph=(3, 9), edge_prob=0.4, feature_dim=3)
    coll = generate_synthetic(spec, 4, name="RT")
    write_tu_dataset(coll, tmp_path)
    back = load_tu_dataset(tmp_path, "RT")
    assert len(back) == len(coll)
    for a, b in zip(coll, back):
        assert _canonical(a) == _canonical(b)
        assert a.node_labels.tolist() == b.node_labels.tolist()
        assert a.graph_label == b.graph_label


def test_degree_sum_is_twice_edges(rng):
    for _ in range(20):
        g = random_graph(int(rng.integers(1, 25)), 0.3, rng)
        assert int(g.degrees().sum()) == 2 * g.num_edges


def test_synthetic_complete_and_empty():
    k4 = generate_synthetic(SyntheticSpec(num_graphs=1, nodes_per_graph=4, edge_prob=1.0, feature_dim=2), 99)[0]
    assert k4.num_edges == 6
    empty = generate_synthetic(SyntheticSpec(num_graphs=1, nodes_per_graph=6, edge_prob=0.0), 99)[0]
    assert empty.num_edges == 0


def test_synthetic_deterministic():
    spec = SyntheticSpec(num_graphs=4, nodes_per_graph=(5, 12))
    a, b = generate_synthetic(spec, 3), generate_synthetic(spec, 3)
    for x, y in zip(a, b):
        assert x.csr_targets.tobytes() == y.csr_targets.tobytes()
        assert x.features.tobytes() == y.features.tobytes()


@pytest.mark.parametrize("bad", [dict(edge_prob=1.5), dict(num_graphs=0), dict(feature_dim=0)])
def test_synthetic_preconditions(bad):
    with pytest.raises(ValueError):
        SyntheticSpec(**bad)


def test_collection_rejects_mixed_dims():
    with pytest.raises(ValueError):
        GraphCollection((Graph.from_edges(1, []), Graph.from_edges(1, [], np.ones((1, 2)))), "x", 1)


def test_permute_relabels(rng):
    g = random_graph(8, 0.4, rng)
    perm = rng.permutation(8)
    h = g.permute(perm)
    for u, v in g.undirected_edges():
        assert h.has_edge(int(perm[u]), int(perm[v]))
    assert h.num_edges == g.num_edges
    np.testing.assert_array_equal(h.features[perm], g.features)
