import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import fixtures as fx
from strgode.graphs import (
    RelationGraph, Selection, TriGraph, build_correlation, build_physical, build_similarity,
    correlation_ratios, dtw_distance, dtw_matrix, read_graph, read_trigraph, similarity_from_distances,
    write_graph, write_trigraph,
)


def assert_weights(graph, expected, tol=1e-9):
    got = fx.weights_dict(graph)
    assert set(got) == set(expected)
    for key, w in expected.items():
        assert abs(got[key] - w) <= tol, key


def row_sums_ok(graph):
    W = graph.weights()
    sums = W.sum(axis=1)
    nonempty = graph.adjacency().any(axis=1)
    return np.all(np.abs(sums[nonempty] - 1) <= 1e-9)


# -- physical -----------------------------------------------------------------

def test_path_graph():
    W = build_physical([(0, 1), (1, 2)], 3).weights()
    assert W[1, 0] == W[1, 2] == 0.5
    assert W[0, 1] == 1.0


def test_isolated_node_row_empty():
    W = build_physical([(0, 1)], 3).weights()
    assert not W[2].any()
    assert np.all(np.isfinite(W))


def test_star_center():
    W = build_physical([(0, k) for k in range(1, 5)], 5).weights()
    np.testing.assert_array_equal(W[0, 1:], 0.25)


def test_physical_rejects_bad_pairs():
    with pytest.raises(ValueError):
        build_physical([(0, 3)], 3)
    with pytest.raises(ValueError):
        build_physical([(1, 1)], 3)


def test_duplicate_pairs_deduplicated():
    assert build_physical([(0, 1), (1, 0), (0, 1)], 2) == build_physical([(0, 1)], 2)


def test_hand_fixture_all_three_graphs():
    assert_weights(build_physical(fx.TOPOLOGY, 4), fx.PHYSICAL_W)
    sim = build_similarity(fx.SERIES, Selection.top_k(fx.SIMILARITY_K), normalize=False)
    assert_weights(sim, fx.SIMILARITY_W)
    cor = build_correlation(fx.OD, Selection.threshold(fx.CORRELATION_TAU))
    assert_weights(cor, fx.CORRELATION_W)
    for g in (sim, cor):
        assert row_sums_ok(g)


def test_fixture_dtw_values():
    D = dtw_matrix(fx.SERIES, normalize=False)
    for (i, j), d in fx.DTW.items():
        assert D[i, j] == pytest.approx(d, abs=1e-12)


# -- dtw ----------------------------------------------------------------------

def test_dtw_example():
    assert dtw_distance([(0, 0), (0, 0)], [(1, 0), (1, 0)]) == 2.0


def test_dtw_empty_rejected():
    with pytest.raises(ValueError):
        dtw_distance(np.zeros((0, 2)), np.zeros((2, 2)))


series = st.integers(1, 6).flatmap(
    lambda n: arrays(np.float64, (n, 2), elements=st.floats(-3, 3, allow_nan=False)))


@settings(max_examples=60, deadline=None)
@given(series, series)
def test_dtw_matches_brute_force(a, b):
    assert dtw_distance(a, b) == fx.brute_force_dtw(a, b)


@settings(max_examples=60, deadline=None)
@given(series, series)
def test_dtw_symmetric_nonnegative(a, b):
    d = dtw_distance(a, b)
    assert d >= 0
    assert d == pytest.approx(dtw_distance(b, a), abs=1e-12)
    assert dtw_distance(a, a) == 0


def test_dtw_zero_only_on_equal():
    assert dtw_distance([1.0, 2.0], [1.0, 2.0 + 1e-9]) > 0


def test_dtw_band_covers_full_when_wide():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(30, 2)), rng.normal(size=(25, 2))
    assert dtw_distance(a, b, band=40) == dtw_distance(a, b)
    assert dtw_distance(a, b, band=5) >= dtw_distance(a, b)


def test_delannoy_counts_sanity():
    assert fx.count_paths(2, 2) == 3
    assert fx.count_paths(3, 3) == 13


# -- similarity / correlation ------------------------------------------------

def test_identical_stations_always_linked():
    x = np.array([[1.0, 2.0], [3.0, 1.0], [0.0, 2.0]])
    g = build_similarity([x, x], Selection.threshold(1.0))
    assert fx.weights_dict(g) == {(0, 1): 1.0, (1, 0): 1.0}


def test_threshold_three_station_toy():
    # only (0, 1) has exp(-d) >= 0.5
    D = np.array([[0.0, 0.1, 5.0], [0.1, 0.0, 6.0], [5.0, 6.0, 0.0]])
    g = similarity_from_distances(D, Selection.threshold(0.5))
    assert fx.weights_dict(g) == {(0, 1): 1.0, (1, 0): 1.0}


def test_top1_single_edge_per_row():
    rng = np.random.default_rng(1)
    g = build_similarity(rng.normal(size=(3, 10, 2)), Selection.top_k(1))
    W = g.weights()
    assert np.all(g.adjacency().sum(axis=1) == 1)
    assert np.all(W.sum(axis=1) == 1.0)


def test_top_k_ties_prefer_lower_index():
    D = np.ones((4, 4)) - np.eye(4)
    g = similarity_from_distances(D, Selection.top_k(2))
    assert sorted(j for i, j, _ in g.edges if i == 3) == [0, 1]
    assert sorted(j for i, j, _ in g.edges if i == 0) == [1, 2]


def test_selection_errors():
    x = np.zeros((3, 4, 2))
    with pytest.raises(ValueError):
        build_similarity(x, Selection.top_k(3))
    with pytest.raises(ValueError):
        build_similarity(x, Selection.threshold(0.0))
    with pytest.raises(ValueError):
        build_correlation(np.ones((3, 3)), Selection.top_k(0))


def test_long_series_similarity_does_not_underflow():
    # exp(-DTW) underflows for long series; edges must still be selected
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 2000, 2))
    g = build_similarity(x, Selection.top_k(2))
    assert len(g.edges) == 8
    assert row_sums_ok(g)


def test_correlation_ratio_row():
    C = correlation_ratios(np.array([[30.0, 70.0, 0.0], [0.0, 0.0, 0.0], [1.0, 1.0, 2.0]]))
    np.testing.assert_allclose(C[0], [0.3, 0.7, 0.0])
    np.testing.assert_array_equal(C[1], 0.0)


def test_correlation_zero_row_empty():
    g = build_correlation(np.array([[0.0, 0.0], [3.0, 0.0]]), Selection.threshold(0.02))
    assert fx.weights_dict(g) == {(1, 0): 1.0}


def test_negative_od_rejected():
    with pytest.raises(ValueError):
        correlation_ratios(np.array([[0.0, -1.0], [0.0, 0.0]]))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (5, 5), elements=st.floats(0, 100)), st.sampled_from(
    [Selection.threshold(0.05), Selection.threshold(0.3), Selection.top_k(1), Selection.top_k(3)]))
def test_row_normalization_property(od, sel):
    g = build_correlation(od, sel)
    assert row_sums_ok(g)
    assert all(i != j for i, j, _ in g.edges)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)).filter(lambda p: p[0] != p[1]), max_size=12))
def test_physical_symmetric_pattern(pairs):
    A = build_physical(pairs, 6).adjacency()
    np.testing.assert_array_equal(A, A.T)
    assert row_sums_ok(build_physical(pairs, 6))


@settings(max_examples=15, deadline=None)
@given(st.permutations(range(5)), st.integers(0, 1000))
def test_permutation_consistency(perm, seed):
    rng = np.random.default_rng(seed)
    series = rng.normal(size=(5, 12, 2))
    od = rng.integers(0, 20, size=(5, 5)).astype(float)
    pairs = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 3)]
    inv = np.argsort(perm)
    relabeled = [
        (build_physical(pairs, 5), build_physical([(perm[i], perm[j]) for i, j in pairs], 5)),
        (build_similarity(series, Selection.top_k(2)), build_similarity(series[inv], Selection.top_k(2))),
        (build_correlation(od, Selection.threshold(0.1)),
         build_correlation(od[np.ix_(inv, inv)], Selection.threshold(0.1))),
    ]
    for original, rebuilt in relabeled:
        expect = original.permuted(perm)
        got = fx.weights_dict(rebuilt)
        assert set(got) == set(fx.weights_dict(expect))
        for key, w in fx.weights_dict(expect).items():
            assert got[key] == pytest.approx(w, abs=1e-12)


# -- file format --------------------------------------------------------------

def test_graph_file_round_trip(tmp_path):
    g = build_correlation(fx.OD, Selection.threshold(fx.CORRELATION_TAU))
    write_graph(g, tmp_path / "c.graph")
    text = (tmp_path / "c.graph").read_text()
    assert text.splitlines()[0] == "strgode-graph v1 correlation 4"
    assert read_graph(tmp_path / "c.graph") == g


def test_trigraph_round_trip(tmp_path):
    tri = TriGraph(build_physical(fx.TOPOLOGY, 4),
                   build_similarity(fx.SERIES, Selection.top_k(2), normalize=False),
                   build_correlation(fx.OD, Selection.threshold(0.2)))
    write_trigraph(tri, tmp_path)
    assert read_trigraph(tmp_path) == tri


def test_malformed_graph_names_line(tmp_path):
    p = tmp_path / "bad.graph"
    p.write_text("strgode-graph v1 physical 3\n0 1 1.0\n1 x 0.5\n")
    with pytest.raises(ValueError, match=r"bad.graph:3"):
        read_graph(p)


def test_selection_parse_round_trip():
    for text in ("top_k:10", "threshold:0.02"):
        assert str(Selection.parse(text)) == text


def test_relation_graph_rejects_bad_edges():
    with pytest.raises(ValueError):
        RelationGraph(2, ((0, 2, 1.0),), "physical")
    with pytest.raises(ValueError):
        RelationGraph(2, ((0, 1, -0.5),), "physical")
    with pytest.raises(ValueError):
        RelationGraph(2, ((0, 1, math.nan),), "physical")
    assert math.isclose(sum(fx.SIMILARITY_W[(0, j)] for j in (1, 3)), 1.0)


def test_underflowed_weight_keeps_edge():
    # neighbour 2 is selected but its share exp(-900) underflows to zero
    D = np.array([[0.0, 1.0, 901.0], [1.0, 0.0, 5.0], [901.0, 5.0, 0.0]])
    g = similarity_from_distances(D, Selection.top_k(2))
    assert g.adjacency()[0].sum() == 2
    assert g.weights()[0, 2] == 0.0 and g.weights()[0, 1] == 1.0
    np.testing.assert_array_equal(g.mean_operator()[0], [0.0, 0.5, 0.5])
