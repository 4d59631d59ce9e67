import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SMALL_SCHEMA, make_graph, random_graph
from supplink.errors import DataError
from supplink.graph import (CompanyFeatures, FeatureBlock, FeatureBlockSchema, GraphSnapshot, degree_stats,
                            load_graph, neighbors, remove_edges, write_graph)

HEADER = "company_id,industry,country,industry_0,industry_1,industry_2,mix_0,mix_1,size_0\n"


def write(tmp_path, nodes: str, edges: str):
    n, e = tmp_path / "nodes.csv", tmp_path / "edges.csv"
    n.write_text(nodes, encoding="utf-8")
    e.write_text(edges, encoding="utf-8")
    return n, e


def test_load_three_nodes_two_edges(tmp_path):
    n, e = write(tmp_path,
                 HEADER + "A,tech,US,1,0,0,0.5,0.5,1.2\nB,retail,JP,0,1,0,1,0,-0.3\nC,tech,US,0,0,1,0.2,0.8,0\n",
                 "year,edge_type,from_id,to_id\n2020,supply,A,B\n2020,supply,B,C\n")
    g = load_graph(n, e, SMALL_SCHEMA)
    assert g.num_companies == 3
    assert neighbors(g, "B", "supplier", 2020) == ["A"]
    assert neighbors(g, "B", "customer", 2020) == ["C"]
    assert neighbors(g, "A", "supplier", 2020) == []
    assert g.strata["B"] == ("retail", "JP")
    np.testing.assert_array_equal(g.features["A"].values, [1, 0, 0, 0.5, 0.5, 1.2])


def test_unseen_edge_endpoint_is_created_absent(tmp_path):
    n, e = write(tmp_path, HEADER + "A,tech,US,1,0,0,0.5,0.5,1\n",
                 "year,edge_type,from_id,to_id\n2020,supply,A,X\n")
    g = load_graph(n, e, SMALL_SCHEMA)
    assert np.array_equal(g.features["X"].presence_mask, np.zeros(3))
    assert np.array_equal(g.features["X"].values, np.zeros(6))
    assert not g.is_covered("X")


def test_absent_block_is_masked(tmp_path):
    n, e = write(tmp_path, HEADER + "A,tech,US,1,0,0,,,2.5\n", "year,edge_type,from_id,to_id\n")
    f = load_graph(n, e, SMALL_SCHEMA).features["A"]
    assert f.presence_mask.tolist() == [1.0, 0.0, 1.0]


def test_simplex_not_summing_to_one_names_block(tmp_path):
    n, e = write(tmp_path, HEADER + "A,tech,US,1,0,0,0.5,0.3,1\n", "year,edge_type,from_id,to_id\n")
    with pytest.raises(DataError, match=r"nodes\.csv:2.*mix"):
        load_graph(n, e, SMALL_SCHEMA)


@pytest.mark.parametrize("row,needle", [
    ("A,tech,US,1,1,0,0.5,0.5,1", "industry"),
    ("A,tech,US,1,0,0,0.5,,1", "partially"),
    ("A,tech,US,1,0,0,0.5,0.5", "cells"),
    ("A,tech,US,1,0,0,0.5,0.5,nan", "non-finite"),
])
def test_malformed_node_rows(tmp_path, row, needle):
    n, e = write(tmp_path, HEADER + row + "\n", "year,edge_type,from_id,to_id\n")
    with pytest.raises(DataError, match=needle):
        load_graph(n, e, SMALL_SCHEMA)


def test_duplicate_company_id(tmp_path):
    n, e = write(tmp_path, HEADER + "A,t,US,1,0,0,1,0,1\nA,t,US,1,0,0,1,0,1\n", "year,edge_type,from_id,to_id\n")
    with pytest.raises(DataError, match=r"nodes\.csv:3: duplicate"):
        load_graph(n, e, SMALL_SCHEMA)


@pytest.mark.parametrize("row,needle", [
    ("20x0,supply,A,B", "year"),
    ("2020,partner,A,B", "edge_type"),
    ("2020,supply,A,A", "self-loop"),
    ("2020,supply,A", "4 cells"),
])
def test_malformed_edge_rows(tmp_path, row, needle):
    n, e = write(tmp_path, HEADER + "A,t,US,1,0,0,1,0,1\n", f"year,edge_type,from_id,to_id\n{row}\n")
    with pytest.raises(DataError, match=rf"edges\.csv:2: .*{needle}"):
        load_graph(n, e, SMALL_SCHEMA)


def test_loader_ignores_row_order(tmp_path):
    rows = ["A,t,US,1,0,0,1,0,1", "B,t,US,0,1,0,0,1,2", "C,t,US,0,0,1,1,0,3"]
    edges = ["2019,supply,A,B", "2020,competitor,C,A", "2020,supply,B,C"]
    n1, e1 = write(tmp_path, HEADER + "\n".join(rows) + "\n", "year,edge_type,from_id,to_id\n" + "\n".join(edges) + "\n")
    g1 = load_graph(n1, e1, SMALL_SCHEMA)
    sub = tmp_path / "rev"
    sub.mkdir()
    n2, e2 = write(sub, HEADER + "\n".join(rows[::-1]) + "\n",
                   "year,edge_type,from_id,to_id\n" + "\n".join(edges[::-1]) + "\n")
    assert load_graph(n2, e2, SMALL_SCHEMA) == g1


def test_schema_validation():
    with pytest.raises(DataError):
        FeatureBlockSchema((FeatureBlock("a", "real", 1), FeatureBlock("a", "real", 2)))
    with pytest.raises(DataError):
        FeatureBlockSchema((FeatureBlock("a", "real", 0),))
    with pytest.raises(DataError):
        FeatureBlockSchema((FeatureBlock("a", "weird", 1),))
    s = FeatureBlockSchema((FeatureBlock("a", "real", 2), FeatureBlock("b", "one-hot", 3)))
    assert s.total_width == 5
    assert FeatureBlockSchema.from_dict(s.to_dict()) == s


def test_snapshot_invariants():
    with pytest.raises(DataError):
        GraphSnapshot(2020, frozenset({("A", "A")}), frozenset())
    with pytest.raises(DataError):
        GraphSnapshot(2020, frozenset(), frozenset({("B", "A")}))
    g = make_graph("AB", {2020: []})
    with pytest.raises(DataError):
        g.with_snapshots([GraphSnapshot(2021, frozenset(), frozenset()),
                          GraphSnapshot(2020, frozenset(), frozenset())])


# --- neighbors ------------------------------------------------------------------

def test_neighbor_direction():
    g = make_graph("AB", {2020: [("A", "B")]})
    assert neighbors(g, "B", "supplier", 2020) == ["A"]
    assert neighbors(g, "A", "customer", 2020) == ["B"]
    assert neighbors(g, "A", "supplier", 2020) == []


def test_competitor_symmetry():
    g = make_graph("AB", {2020: []}, {2020: [("A", "B")]})
    assert neighbors(g, "A", "competitor", 2020) == ["B"]
    assert neighbors(g, "B", "competitor", 2020) == ["A"]


def test_star_hub_has_fifty_sorted_customers():
    ids = ["H"] + [f"c{i:02d}" for i in range(50)]
    rng = np.random.default_rng(0)
    edges = [("H", c) for c in rng.permutation(ids[1:])]
    g = make_graph(ids, {2020: edges})
    out = neighbors(g, "H", "customer", 2020)
    assert len(out) == 50 and out == sorted(out)


def test_unknown_year_lists_available():
    g = make_graph("AB", {2019: [("A", "B")], 2020: []})
    with pytest.raises(DataError, match=r"\[2019, 2020\]"):
        neighbors(g, "A", "customer", 2018)


# --- remove_edges -----------------------------------------------------------------

def test_remove_edge_from_all_years():
    g = make_graph("ABC", {2019: [("A", "B"), ("B", "C")], 2020: [("A", "B")]})
    h = remove_edges(g, {("A", "B")})
    assert all(("A", "B") not in s.supply_edges for s in h.snapshots)
    assert ("B", "C") in h.snapshot(2019).supply_edges
    assert ("A", "B") in g.snapshot(2020).supply_edges   # original untouched


def test_remove_missing_pair_is_noop():
    g = make_graph("ABC", {2020: [("A", "B")]})
    assert remove_edges(g, {("C", "A")}) == g


def test_remove_all_edges():
    g = random_graph(12, 0.3, seed=1, years=(2019, 2020))
    h = remove_edges(g, g.all_supply_pairs())
    for y in h.years:
        for c in h.ids:
            assert neighbors(h, c, "supplier", y) == [] and neighbors(h, c, "customer", y) == []


# --- properties -------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 15), p=st.floats(0.0, 0.6), seed=st.integers(0, 10_000))
def test_neighbor_properties(n, p, seed):
    g = random_graph(n, p, seed, years=(2019, 2020), competitor_p=0.3)
    for y in g.years:
        for i in g.ids:
            for et in ("supplier", "customer", "competitor"):
                assert i not in neighbors(g, i, et, y)
            for j in neighbors(g, i, "customer", y):
                assert i in neighbors(g, j, "supplier", y)
            for j in neighbors(g, i, "supplier", y):
                assert i in neighbors(g, j, "customer", y)
            for j in neighbors(g, i, "competitor", y):
                assert i in neighbors(g, j, "competitor", y)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(2, 12), p=st.floats(0.0, 0.5), seed=st.integers(0, 10_000), absent=st.integers(0, 3))
def test_round_trip(tmp_path_factory, n, p, seed, absent):
    g = random_graph(n, p, seed, years=(2018, 2020), competitor_p=0.2)
    feats = dict(g.features)
    for cid in list(feats)[:absent]:
        mask = np.array([1.0, 0.0, 1.0])
        f = feats[cid]
        feats[cid] = CompanyFeatures(f.values * np.repeat(mask, [3, 2, 1]), mask)
    g = type(g)(g.schema, feats, g.snapshots, {c: ("ind", "US") for c in g.ids})
    d = tmp_path_factory.mktemp("rt")
    write_graph(g, d / "n.csv", d / "e.csv")
    h = load_graph(d / "n.csv", d / "e.csv", g.schema)
    # years without any edge do not survive a CSV round trip
    keep = [s for s in g.snapshots if s.supply_edges or s.competitor_edges]
    assert h == g.with_snapshots(keep)


# --- degree_stats --------------------------------------------------------------------

def test_degree_stats_single_edge():
    assert degree_stats(make_graph("AB", {2020: [("A", "B")]}), 2020) == (1.0, 1.0, 1)


def test_degree_stats_star_plus_singles():
    ids = ["H"] + [f"c{i}" for i in range(10)] + [f"s{i}" for i in range(5)]
    edges = [("H", f"c{i}") for i in range(10)] + [(f"s{i}", "H") for i in range(5)]
    assert degree_stats(make_graph(ids, {2020: edges}), 2020) == (2.5, 1.0, 10)


def test_degree_stats_without_edges():
    with pytest.raises(DataError):
        degree_stats(make_graph("AB", {2020: []}), 2020)
