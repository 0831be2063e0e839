import itertools
import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nosaf.errors import ArgumentError, DataError, IntegrityError, ParseError
from nosaf.graph import (Graph, SbmSpec, SplitMasks, generate_sbm, graph_homophily,
                         isolated_nodes, load_bundle, make_split, node_homophily,
                         node_homophily_all, normalize_adjacency, save_bundle, smoothness_davg)


def random_graph(rng, n=None, k=3, p=0.3, dim=4):
    n = int(rng.integers(2, 15)) if n is None else n
    edges = [(u, v) for u, v in itertools.combinations(range(n), 2) if rng.random() < p]
    return Graph(n, edges, rng.normal(size=(n, dim)), rng.integers(0, k, n), k, "rand")


def brute_homophily(g):
    """Edge-list count per node, independent of the vectorized path."""
    same = [0] * g.n
    deg = [0] * g.n
    for u, v in g.edges.tolist():
        deg[u] += 1
        deg[v] += 1
        if g.labels[u] == g.labels[v]:
            same[u] += 1
            same[v] += 1
    vals = [s / d for s, d in zip(same, deg) if d > 0]
    return sum(vals) / len(vals) if vals else math.nan


# ---------------------------------------------------------------------------- Graph


def test_graph_canonicalizes_edges():
    g = Graph(3, [(2, 0), (0, 2), (1, 2)], np.zeros((3, 1)), [0, 1, 0])
    np.testing.assert_array_equal(g.edges, [[0, 2], [1, 2]])
    np.testing.assert_array_equal(g.neighbors(2), [0, 1])


def test_graph_rejects_bad_edges():
    with pytest.raises(DataError):
        Graph(2, [(0, 0)], np.zeros((2, 1)), [0, 0])
    with pytest.raises(DataError):
        Graph(2, [(0, 2)], np.zeros((2, 1)), [0, 0])
    with pytest.raises(DataError):
        Graph(2, [], np.zeros((2, 1)), [0, 3], num_classes=2)


# ---------------------------------------------------------------------------- adjacency


def test_isolated_node_adjacency():
    adj = normalize_adjacency(Graph(1, [], np.zeros((1, 1)), [0]))
    np.testing.assert_array_equal(adj.densify(), [[1.0]])


def test_single_edge_adjacency():
    adj = normalize_adjacency(Graph(2, [(0, 1)], np.zeros((2, 1)), [0, 0]))
    np.testing.assert_allclose(adj.densify(), np.full((2, 2), 0.5), rtol=0, atol=1e-15)


def test_adjacency_properties_on_random_graphs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        g = random_graph(rng)
        adj = normalize_adjacency(g)
        dense = adj.densify()
        np.testing.assert_array_equal(dense, dense.T)
        assert np.all(adj.values > 0) and np.all(adj.values <= 1)
        np.testing.assert_array_equal(np.diff(adj.row_ptr), g.degrees() + 1)
        # dense oracle: D^-1/2 (A + I) D^-1/2
        a = np.eye(g.n)
        a[g.edges[:, 0], g.edges[:, 1]] = a[g.edges[:, 1], g.edges[:, 0]] = 1
        dinv = 1 / np.sqrt(a.sum(axis=1))
        np.testing.assert_allclose(dense, dinv[:, None] * a * dinv[None, :], atol=1e-15)


# ---------------------------------------------------------------------------- homophily


def test_star_center_all_same_label():
    g = Graph(5, [(0, i) for i in range(1, 5)], np.zeros((5, 1)), [1] * 5, 2)
    assert node_homophily(g, 0) == 1.0


def test_node_homophily_direct_count():
    g = Graph(4, [(0, 1), (0, 2), (0, 3)], np.zeros((4, 1)), [0, 0, 1, 1], 2)
    assert node_homophily(g, 0) == pytest.approx(1 / 3)
    assert 1 - node_homophily(g, 0) == pytest.approx(2 / 3)


def test_isolated_node_is_flagged():
    g = Graph(3, [(0, 1)], np.zeros((3, 1)), [0, 0, 1], 2)
    assert math.isnan(node_homophily(g, 2))
    np.testing.assert_array_equal(isolated_nodes(g), [2])
    assert graph_homophily(g) == 1.0  # isolated node excluded
    assert math.isnan(graph_homophily(Graph(2, [], np.zeros((2, 1)), [0, 1])))


def test_two_same_label_cliques():
    edges = list(itertools.combinations(range(4), 2)) + list(itertools.combinations(range(4, 8), 2))
    g = Graph(8, edges, np.zeros((8, 1)), [0] * 4 + [1] * 4)
    assert graph_homophily(g) == 1.0


def test_complete_bipartite_is_fully_heterophilic():
    edges = [(u, v) for u in range(3) for v in range(3, 7)]
    g = Graph(7, edges, np.zeros((7, 1)), [0] * 3 + [1] * 4)
    assert graph_homophily(g) == 0.0


def test_graph_homophily_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        g = random_graph(rng)
        expected = brute_homophily(g)
        got = graph_homophily(g)
        if math.isnan(expected):
            assert math.isnan(got)
        else:
            assert got == pytest.approx(expected, abs=1e-15)
            assert 0.0 <= got <= 1.0
        per_node = node_homophily_all(g)
        for i in range(g.n):
            a, b = per_node[i], node_homophily(g, i)
            assert (math.isnan(a) and math.isnan(b)) or a == pytest.approx(b, abs=1e-15)


# ---------------------------------------------------------------------------- smoothness


def brute_davg(h):
    n = len(h)
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            ni, nj = np.linalg.norm(h[i]), np.linalg.norm(h[j])
            cos = 0.0 if ni == 0 or nj == 0 else float(h[i] @ h[j]) / (ni * nj)
            total += 1 - cos
    return 2 * total / (n * (n - 1))


def test_davg_identical_rows():
    assert smoothness_davg(np.tile([[1.0, -2.0, 3.0]], (5, 1))) == pytest.approx(0.0, abs=1e-12)


def test_davg_orthogonal_pair():
    assert smoothness_davg(np.eye(2)) == pytest.approx(1.0)


def test_davg_matches_brute_force():
    h = np.random.default_rng(2).normal(size=(8, 5))
    assert smoothness_davg(h) == pytest.approx(brute_davg(h), abs=1e-12)


def test_davg_zero_rows_count_as_distance_one():
    h = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [2.0, 0.0]])
    assert smoothness_davg(h) == pytest.approx(brute_davg(h), abs=1e-12)


def test_davg_needs_two_rows():
    with pytest.raises(ArgumentError):
        smoothness_davg(np.ones((1, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(1, 5), st.integers(0, 2**31))
def test_davg_range_and_scale_invariance(n, d, seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(n, d))
    h[rng.random(n) < 0.2] = 0.0
    value = smoothness_davg(h)
    assert -1e-12 <= value <= 2 + 1e-12
    scaled = h * rng.uniform(0.1, 10, (n, 1))
    assert smoothness_davg(scaled) == pytest.approx(value, abs=1e-12)
    assert value == pytest.approx(brute_davg(h), abs=1e-12)


# ---------------------------------------------------------------------------- SBM


def test_sbm_homophily_close_to_target():
    vals = [graph_homophily(generate_sbm(SbmSpec(n=400, k=3, target_h=0.9, avg_degree=10, seed=s)))
            for s in range(10)]
    assert abs(np.mean(vals) - 0.9) <= 0.05


def test_sbm_heterophilic_target():
    for s in range(10):
        assert graph_homophily(generate_sbm(SbmSpec(target_h=0.2, seed=s))) < 0.3


def test_sbm_deterministic(tmp_path):
    spec = SbmSpec(n=60, seed=7)
    a, b = generate_sbm(spec), generate_sbm(spec)
    assert a == b
    save_bundle(a, tmp_path / "a")
    save_bundle(b, tmp_path / "b")
    for name in ("meta.json", "nodes.tsv", "edges.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert generate_sbm(SbmSpec(n=60, seed=8)) != a


def test_sbm_structure():
    spec = SbmSpec(n=90, k=3, avg_degree=4, feature_dim=5, seed=3)
    g = generate_sbm(spec)
    assert g.num_edges == math.ceil(90 * 4 / 2)
    np.testing.assert_array_equal(np.bincount(g.labels), [30, 30, 30])
    assert g.features.shape == (90, 5)
    assert np.all(g.edges[:, 0] < g.edges[:, 1])


def test_sbm_class_means_are_separated():
    g = generate_sbm(SbmSpec(n=3000, k=3, class_separation=2.0, noise_std=0.5, seed=4))
    means = np.array([g.features[g.labels == c].mean(axis=0) for c in range(3)])
    for a, b in itertools.combinations(range(3), 2):
        assert np.linalg.norm(means[a] - means[b]) == pytest.approx(2.0, abs=0.1)


@pytest.mark.parametrize("field,value", [("target_h", 1.5), ("target_h", 0.0), ("k", 1),
                                         ("n", 2), ("noise_std", 0.0), ("avg_degree", -1.0)])
def test_sbm_spec_validation_names_field(field, value):
    spec = SbmSpec(**{field: value})
    with pytest.raises(ArgumentError, match=field):
        generate_sbm(spec)


def test_sbm_infeasible_edge_count():
    with pytest.raises(ArgumentError):
        generate_sbm(SbmSpec(n=5, k=2, feature_dim=2, avg_degree=10))


# ---------------------------------------------------------------------------- splits


def test_split_exact_proportions():
    g = Graph(100, [], np.zeros((100, 1)), np.arange(100) % 2)
    m = make_split(g, seed=0)
    assert (len(m.train), len(m.val), len(m.test)) == (60, 20, 20)
    for part in (m.train, m.val, m.test):
        assert np.bincount(g.labels[part]).tolist() == [len(part) // 2] * 2


@pytest.mark.filterwarnings("ignore:class")
def test_split_disjoint_cover_and_deterministic():
    rng = np.random.default_rng(5)
    for i in range(50):
        g = random_graph(rng, n=int(rng.integers(10, 40)), k=3)
        m = make_split(g, seed=i)
        m.validate(g.n)
        again = make_split(g, seed=i)
        for a, b in zip((m.train, m.val, m.test), (again.train, again.val, again.test)):
            np.testing.assert_array_equal(a, b)


def test_split_small_class_goes_to_train():
    g = Graph(12, [], np.zeros((12, 1)), [0] * 10 + [1] * 2)
    with pytest.warns(UserWarning, match="class 1"):
        m = make_split(g)
    assert {10, 11} <= set(m.train.tolist())
    m.validate(12)


def test_split_bad_ratios():
    g = Graph(4, [], np.zeros((4, 1)), [0, 0, 1, 1])
    with pytest.raises(ArgumentError):
        make_split(g, ratios=(0.5, 0.2, 0.2))


# ---------------------------------------------------------------------------- bundles


def test_bundle_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    for i in range(10):
        g = random_graph(rng)
        g.features[0, 0] = 0.1 + 0.2  # not representable in few digits
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            splits = make_split(g, seed=i)
        save_bundle(g, tmp_path / str(i), splits)
        back, sp = load_bundle(tmp_path / str(i))
        assert back == g
        np.testing.assert_array_equal(sp.train, splits.train)
        np.testing.assert_array_equal(sp.test, splits.test)


def test_bundle_without_splits(tmp_path):
    g = random_graph(np.random.default_rng(7))
    save_bundle(g, tmp_path)
    assert load_bundle(tmp_path)[1] is None


def _bundle(tmp_path):
    g = Graph(3, [(0, 1), (1, 2)], np.ones((3, 2)), [0, 1, 0], 2, "tiny")
    save_bundle(g, tmp_path)
    return tmp_path


def test_bundle_unknown_node(tmp_path):
    d = _bundle(tmp_path)
    (d / "edges.tsv").write_text("0\t1\n1\t7\n")
    with pytest.raises(IntegrityError, match="unknown node"):
        load_bundle(d)


def test_bundle_duplicate_edge(tmp_path):
    d = _bundle(tmp_path)
    (d / "edges.tsv").write_text("0\t1\n0\t1\n")
    with pytest.raises(IntegrityError, match="duplicate"):
        load_bundle(d)


def test_bundle_missing_meta(tmp_path):
    d = _bundle(tmp_path)
    (d / "meta.json").unlink()
    with pytest.raises(ParseError, match="meta.json"):
        load_bundle(d)


def test_bundle_malformed_row_reports_line(tmp_path):
    d = _bundle(tmp_path)
    lines = (d / "nodes.tsv").read_text().splitlines()
    lines[1] = "1\tx\t1\t1"
    (d / "nodes.tsv").write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match=r"nodes.tsv:2"):
        load_bundle(d)


def test_bundle_count_mismatch(tmp_path):
    d = _bundle(tmp_path)
    meta = json.loads((d / "meta.json").read_text())
    meta["n"] = 4
    (d / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(IntegrityError):
        load_bundle(d)


def test_bundle_bad_splits(tmp_path):
    d = _bundle(tmp_path)
    (d / "splits.json").write_text(json.dumps({"train": [0, 1], "val": [1], "test": [2]}))
    with pytest.raises(IntegrityError):
        load_bundle(d)


def test_split_masks_validate():
    SplitMasks(np.array([0]), np.array([1]), np.array([2])).validate(3)
    with pytest.raises(IntegrityError):
        SplitMasks(np.array([0]), np.array([1]), np.array([1])).validate(3)
