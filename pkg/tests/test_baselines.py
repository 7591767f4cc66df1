import itertools

import pytest

from sofa.baselines import (
    OptimizerMode,
    compare_modes,
    enumerate_filterpush,
    enumerate_mode,
    enumerate_rw,
    enumerate_siso,
    reports_to_csv,
)
from sofa.cost import StatsBundle
from sofa.dataflow import Dataflow, Edge, Node, WriteDecl, topological_order
from sofa.datamodel import AttributePath, parse_paths
from sofa.enumerator import EnumerationConfig, plan_for
from sofa.rewrite import QueryFacts, read_write_conflicts

CFG = EnumerationConfig(prune=False)


def pipeline(taxonomy, specs):
    """specs: list of (id, concept, config, reads, writes)."""
    nodes = [Node("s", "source", ref="in",
                  schema=parse_paths(["id", "a", "b", "c", "year"]))]
    edges = []
    prev = "s"
    for nid, concept, cfg, reads, writes in specs:
        nodes.append(Node(nid, "op", op=concept, config=cfg,
                          reads=parse_paths(reads),
                          writes=tuple(WriteDecl(AttributePath.parse(p), m)
                                       for p, m in writes)))
        edges.append(Edge(prev, 0, nid, 0))
        prev = nid
    nodes.append(Node("k", "sink"))
    edges.append(Edge(prev, 0, "k", 0))
    return Dataflow(nodes, edges)


def three_conflict_free(taxonomy):
    specs = [
        ("t1", "base:trfrc", {"set": [{"path": "a", "expr": {"lower": "a"}}]},
         ["a"], [("a", "set")]),
        ("t2", "base:trfrc", {"set": [{"path": "b", "expr": {"lower": "b"}}]},
         ["b"], [("b", "set")]),
        ("t3", "base:trfrc", {"set": [{"path": "c", "expr": {"lower": "c"}}]},
         ["c"], [("c", "set")]),
    ]
    d = pipeline(taxonomy, specs)
    stats = StatsBundle(operators={}, sources={"s": 10.0, "in": 10.0})
    return d, stats


def test_rw_pipeline_matches_permutation_oracle(taxonomy):
    """Brute-force oracle: k mutually conflict-free record-at-a-time
    operators admit exactly k! orderings."""
    d, stats = three_conflict_free(taxonomy)
    plans = enumerate_rw(d, taxonomy, stats, CFG)
    facts = QueryFacts.from_dataflow(d, taxonomy)
    ids = ["t1", "t2", "t3"]
    assert all(not read_write_conflicts(facts.instances[x], facts.instances[y])
               for x, y in itertools.combinations(ids, 2))
    expected = len(list(itertools.permutations(ids)))
    assert len(plans) == expected == 6


def test_rw_refuses_fanout_shapes(fixture_cache):
    fx = fixture_cache("parallel-annotate-merge")
    plans = enumerate_rw(fx.dataflow, fx.taxonomy, fx.stats, CFG)
    assert len(plans) == 1
    assert plans[0].dataflow.structurally_equal(fx.dataflow)


def test_rw_handles_multi_source_trees(fixture_cache):
    fx = fixture_cache("supplier-revenue")
    plans = enumerate_rw(fx.dataflow, fx.taxonomy, fx.stats, CFG)
    assert len(plans) == 2  # the two date filters commute


def test_filterpush_without_filters_is_identity(taxonomy):
    d, stats = three_conflict_free(taxonomy)
    plans = enumerate_filterpush(d, taxonomy, stats, CFG)
    assert len(plans) == 1


def test_filterpush_blocked_by_upstream_writer(taxonomy):
    specs = [
        ("t1", "base:trfrc", {"set": [{"path": "a", "expr": {"lower": "a"}}]},
         ["a"], [("a", "set")]),
        ("f1", "base:fltr", {"pred": {"path": "a", "op": "exists"}}, ["a"], []),
    ]
    d = pipeline(taxonomy, specs)
    stats = StatsBundle(operators={}, sources={"s": 10.0})
    plans = enumerate_filterpush(d, taxonomy, stats, CFG)
    assert len(plans) == 1


def test_filterpush_includes_filter_before_merge(fixture_cache):
    fx = fixture_cache("parallel-annotate-merge")
    plans = enumerate_filterpush(fx.dataflow, fx.taxonomy, fx.stats, CFG)
    assert any(
        topological_order(p.dataflow).index("year")
        < topological_order(p.dataflow).index("mrg")
        for p in plans)


def test_filterpush_moves_filters_only(fixture_cache):
    fx = fixture_cache("news-relations")
    plans = enumerate_filterpush(fx.dataflow, fx.taxonomy, fx.stats, CFG)
    base = [n for n in topological_order(fx.dataflow)
            if not n.startswith("f")]
    for p in plans:
        kept = [n for n in topological_order(p.dataflow) if not n.startswith("f")]
        assert kept == base


def test_siso_two_adjacent_swappable(taxonomy):
    specs = [
        ("t1", "base:trfrc", {"set": [{"path": "a", "expr": {"lower": "a"}}]},
         ["a"], [("a", "set")]),
        ("t2", "base:trfrc", {"set": [{"path": "b", "expr": {"lower": "b"}}]},
         ["b"], [("b", "set")]),
    ]
    d = pipeline(taxonomy, specs)
    stats = StatsBundle(operators={}, sources={"s": 10.0})
    plans = enumerate_siso(d, taxonomy, stats, CFG)
    assert len(plans) == 2


def test_siso_non_adjacent_pair_stays_put(taxonomy):
    # t1 and t3 commute but t2 depends on both, so no adjacent swap exists
    specs = [
        ("t1", "base:trfrc", {"set": [{"path": "a", "expr": {"lower": "a"}}]},
         ["a"], [("a", "set")]),
        ("t2", "base:trfrc", {"set": [{"path": "c", "expr": {"concat": [
            {"copy": "a"}, {"copy": "b"}]}}]}, ["a", "b"], [("c", "set")]),
        ("t3", "base:trfrc", {"set": [{"path": "b", "expr": {"lower": "b"}}]},
         ["b"], [("b", "set")]),
    ]
    d = pipeline(taxonomy, specs)
    stats = StatsBundle(operators={}, sources={"s": 10.0})
    plans = enumerate_siso(d, taxonomy, stats, CFG)
    assert len(plans) == 1


def test_trivial_flow_all_modes_count_one(taxonomy):
    d = Dataflow(
        [Node("s", "source", ref="in", schema=parse_paths(["x"])),
         Node("k", "sink")],
        [Edge("s", 0, "k", 0)])
    stats = StatsBundle(operators={}, sources={"s": 5.0, "in": 5.0})
    for mode in OptimizerMode:
        assert len(enumerate_mode(mode, d, taxonomy, stats, CFG)) == 1


@pytest.mark.parametrize("name", ["parallel-annotate-merge", "supplier-revenue",
                                  "term-frequency"])
def test_subsumption_chain(fixture_cache, name):
    fx = fixture_cache(name)
    d, t, stats = fx.dataflow, fx.taxonomy, fx.stats
    spaces = {m: {p.canon for p in enumerate_mode(m, d, t, stats, CFG)}
              for m in OptimizerMode}
    orig = plan_for(d, t, stats).canon
    def strip(s):
        return s - {orig}
    assert strip(spaces[OptimizerMode.SISO]) <= strip(spaces[OptimizerMode.RW])
    assert strip(spaces[OptimizerMode.RW]) <= strip(spaces[OptimizerMode.SOFA])
    assert strip(spaces[OptimizerMode.FILTERPUSH]) <= strip(spaces[OptimizerMode.SOFA])


def test_relational_tree_sofa_equals_rw(fixture_cache):
    fx = fixture_cache("supplier-revenue")
    d, t, stats = fx.dataflow, fx.taxonomy, fx.stats
    sofa_plans = enumerate_mode(OptimizerMode.SOFA, d, t, stats, CFG)
    rw_plans = enumerate_mode(OptimizerMode.RW, d, t, stats, CFG)
    assert {p.canon for p in sofa_plans} == {p.canon for p in rw_plans}


def test_compare_modes_table(fixture_cache):
    fx = fixture_cache("parallel-annotate-merge")
    reports = compare_modes(
        fx.dataflow, fx.taxonomy, fx.stats,
        [OptimizerMode.SOFA, OptimizerMode.RW],
        corpus_config={"docs": 30}, seed=3)
    by_mode = {r.mode: r for r in reports}
    assert by_mode["sofa"].plans == 12
    assert by_mode["rw"].plans == 1
    assert by_mode["sofa"].best_cost <= by_mode["rw"].best_cost
    assert by_mode["sofa"].runtime_units <= by_mode["rw"].runtime_units
    csv_text = reports_to_csv(reports)
    assert csv_text.splitlines()[0] == "mode,plans,plansPruned,bestCost,runtimeUnits"
    assert len(csv_text.splitlines()) == 3
