from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgfm.graph import (AttributedGraph, GraphFormatError, UndefinedCVError, bfs_distances, degree_stats,
                        few_shot_split, k_hop_subgraph, link_split, load_graph, perturb_edges, perturb_features,
                        save_graph, unify_features)

from conftest import path3


def write(tmp_path, text, name="g.graph"):
    p = tmp_path / name
    p.write_text(text)
    return p


@st.composite
def random_graphs(draw, max_nodes=12):
    n = draw(st.integers(1, max_nodes))
    pairs = draw(st.lists(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1)), max_size=3 * n))
    d = draw(st.integers(1, 3))
    seed = draw(st.integers(0, 2**16))
    feats = np.random.default_rng(seed).normal(size=(n, d))
    return AttributedGraph.from_edges(n, pairs, feats)


# ------------------------------------------------------------------- loading

def test_load_single_node_no_edges(tmp_path):
    g = load_graph(write(tmp_path, "GRAPH v1 1 0 2 0\n0 0\n-1\n"))
    assert g.num_nodes == 1 and g.num_edges == 0
    assert g.features.tolist() == [[0.0, 0.0]]


def test_load_path3_degrees(tmp_path):
    g = load_graph(write(tmp_path, "GRAPH v1 3 2 2 0\n1 2\n3 4\n5 6\n-1\n-1\n-1\n0 1\n1 2\n"))
    assert g.degrees().tolist() == [1, 2, 1]


def test_load_rejects_out_of_range_endpoint(tmp_path):
    with pytest.raises(GraphFormatError, match="outside"):
        load_graph(write(tmp_path, "GRAPH v1 3 1 1 0\n0\n0\n0\n-1\n-1\n-1\n0 5\n"))


@pytest.mark.parametrize("text,match", [
    ("GRAPH v2 1 0 1 0\n0\n-1\n", "header"),
    ("GRAPH v1 2 0 1 0\n0\n-1\n-1\n", "expected"),
    ("GRAPH v1 1 0 2 0\n0\n-1\n", "columns"),
    ("GRAPH v1 1 0 1 0\n0\n-1\n0 0\n", "trailing"),
    ("", "empty"),
])
def test_load_rejects_malformed(tmp_path, text, match):
    with pytest.raises(GraphFormatError, match=match):
        load_graph(write(tmp_path, text))


def test_load_symmetrizes_and_dedups(tmp_path):
    g = load_graph(write(tmp_path, "GRAPH v1 3 3 1 0\n0\n0\n0\n-1\n-1\n-1\n0 1\n1 0\n2 1\n"))
    assert g.num_edges == 2
    assert g.has_edge(1, 0) and g.has_edge(0, 1) and g.has_edge(1, 2)


@settings(max_examples=50, deadline=None)
@given(random_graphs())
def test_save_load_round_trip(tmp_path_factory, g):
    p = tmp_path_factory.mktemp("rt") / "g.graph"
    save_graph(g, p)
    h = load_graph(p)
    assert h.num_nodes == g.num_nodes
    np.testing.assert_array_equal(h.indptr, g.indptr)
    np.testing.assert_array_equal(h.indices, g.indices)
    np.testing.assert_array_equal(h.features, g.features)


@settings(max_examples=50, deadline=None)
@given(random_graphs())
def test_adjacency_symmetric_no_self_loops(g):
    pairs = g.edge_pairs()
    for u, v in pairs:
        assert u != v and g.has_edge(v, u)
    assert len({tuple(p) for p in pairs}) == pairs.shape[0]


def test_labels_round_trip(tmp_path):
    g = AttributedGraph.from_edges(3, [(0, 1)], np.zeros((3, 1)), np.array([0, 1, -1]))
    save_graph(g, tmp_path / "l.graph")
    h = load_graph(tmp_path / "l.graph")
    assert h.labels.tolist() == [0, 1, -1] and h.num_classes == 2


def test_unify_features_pads_and_truncates():
    g = path3(2)
    assert unify_features(g, 4).features[:, 2:].sum() == 0
    np.testing.assert_array_equal(unify_features(g, 1).features[:, 0], g.features[:, 0])


# ---------------------------------------------------------------- statistics

def test_degree_stats_cycle():
    s = degree_stats(AttributedGraph.from_edges(3, [(0, 1), (1, 2), (2, 0)]))
    assert (s.mean, s.std, s.cv) == (2.0, 0.0, 0.0)


def test_degree_stats_path3():
    s = degree_stats(path3())
    assert s.mean == pytest.approx(1.3333, abs=1e-4)
    assert s.std == pytest.approx(0.4714, abs=1e-4)
    assert s.cv == pytest.approx(0.3536, abs=1e-4)


def test_degree_stats_star():
    s = degree_stats(AttributedGraph.from_edges(4, [(0, 1), (0, 2), (0, 3)]))
    assert s.mean == pytest.approx(1.5)
    assert s.std == pytest.approx(0.8660, abs=1e-4)
    assert s.cv == pytest.approx(0.5774, abs=1e-4)


def test_degree_stats_isolated_raises():
    with pytest.raises(UndefinedCVError):
        degree_stats(AttributedGraph.from_edges(3, []))


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_regular_graph_cv_exactly_zero(k):
    n = 10
    edges = [(i, (i + j) % n) for i in range(n) for j in range(1, k + 1)]
    assert degree_stats(AttributedGraph.from_edges(n, edges)).cv == 0.0


# ------------------------------------------------------------------ subgraphs

def test_zero_hop_subgraph():
    s = k_hop_subgraph(path3(), 1, 0)
    assert s.nodes.tolist() == [1] and s.num_edges == 0


def test_path3_one_hop():
    s = k_hop_subgraph(path3(), 0, 1)
    assert s.nodes.tolist() == [0, 1]
    assert s.edges.tolist() == [[0, 1]]


def test_saturates_at_component():
    g = AttributedGraph.from_edges(5, [(0, 1), (1, 2), (3, 4)])
    s = k_hop_subgraph(g, 0, 10)
    assert sorted(s.nodes.tolist()) == [0, 1, 2]


@settings(max_examples=60, deadline=None)
@given(random_graphs(), st.integers(0, 4), st.data())
def test_subgraph_properties(g, k, data):
    c = data.draw(st.integers(0, g.num_nodes - 1))
    s = k_hop_subgraph(g, c, k)
    s_next = k_hop_subgraph(g, c, k + 1)
    assert s.nodes[0] == c
    assert set(s.nodes.tolist()) <= set(s_next.nodes.tolist())
    assert set(s.nodes.tolist()) == set(bfs_distances(g, c, k))
    # induced-edge completeness
    inside = set(s.nodes.tolist())
    expected = {(u, v) for u, v in g.edge_pairs() if u in inside and v in inside}
    got = {tuple(sorted((int(s.nodes[a]), int(s.nodes[b])))) for a, b in s.edges}
    assert got == expected
    np.testing.assert_array_equal(s.features, g.features[s.nodes])


# --------------------------------------------------------------------- splits

def labeled_graph(n=40, classes=2, seed=0):
    rng = np.random.default_rng(seed)
    edges = rng.integers(0, n, size=(3 * n, 2))
    return AttributedGraph.from_edges(n, edges, rng.normal(size=(n, 3)), np.arange(n) % classes)


def test_one_shot_two_classes():
    sp_ = few_shot_split(labeled_graph(), 1, seed=0)
    assert sp_.support_nodes().shape[0] == 2
    assert not set(sp_.support_nodes()) & set(sp_.query)


def test_few_shot_deterministic_and_validation():
    g = labeled_graph()
    a, b = few_shot_split(g, 3, 5, val_shots=1), few_shot_split(g, 3, 5, val_shots=1)
    np.testing.assert_array_equal(a.support_nodes(), b.support_nodes())
    np.testing.assert_array_equal(a.query, b.query)
    assert a.val_nodes().shape[0] == 2
    assert not set(a.val_nodes()) & (set(a.query) | set(a.support_nodes()))


def test_few_shot_too_few_nodes():
    with pytest.raises(ValueError, match="class"):
        few_shot_split(labeled_graph(n=6), 4, 0)


def test_link_split_invariants():
    g = labeled_graph()
    s = link_split(g, 0.1, 0.2, seed=3)
    for u, v in s.test_pos:
        assert not s.train_graph.has_edge(u, v)
    for u, v in np.concatenate([s.test_neg, s.val_neg]):
        assert not g.has_edge(u, v) and u != v
    assert s.train_pos.shape[0] + s.val_pos.shape[0] + s.test_pos.shape[0] == g.num_edges
    s2 = link_split(g, 0.1, 0.2, seed=3)
    np.testing.assert_array_equal(s.test_neg, s2.test_neg)


def test_link_split_no_test():
    assert link_split(labeled_graph(), 0.1, 0.0, 0).test_pos.shape[0] == 0


def test_link_split_needs_edges():
    with pytest.raises(ValueError):
        link_split(AttributedGraph.from_edges(3, []), 0.1, 0.1, 0)


# --------------------------------------------------------------- perturbations

def ring10():
    return AttributedGraph.from_edges(10, [(i, (i + 1) % 10) for i in range(10)], np.ones((10, 2)))


def test_edge_drop_zero_is_identity():
    g = ring10()
    h = perturb_edges(g, 0.0, 1)
    np.testing.assert_array_equal(h.indices, g.indices)
    np.testing.assert_array_equal(h.features, g.features)


def test_edge_drop_half_of_ten():
    assert perturb_edges(ring10(), 0.5, 0).num_edges == 5


def test_feature_mask_full():
    assert not perturb_features(ring10(), 1.0, 0).features.any()


@settings(max_examples=40, deadline=None)
@given(random_graphs(), st.floats(0, 1), st.integers(0, 100))
def test_perturbation_counts(g, r, seed):
    h = perturb_edges(g, r, seed)
    assert h.num_edges == g.num_edges - int(np.floor(r * g.num_edges))
    assert set(map(tuple, h.edge_pairs())) <= set(map(tuple, g.edge_pairs()))
    f = perturb_features(g, r, seed)
    zeroed = (~f.features.any(axis=1)) & g.features.any(axis=1)
    assert zeroed.sum() <= int(np.floor(r * g.num_nodes))
