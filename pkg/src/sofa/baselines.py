"""Competitor optimizer modes for plan-space and quality comparison.

The baselines share the enumeration skeleton with restricted rule sets:
RW uses the read/write-conflict template only (and refuses fan-out-shaped
flows), FILTERPUSH moves filter instances only, SISO swaps adjacent
single-input/single-output operator pairs. None of them expand complex
operators.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Optional

from .cost import StatsBundle, plan_cost
from .dataflow import Dataflow, Edge, validate
from .enumerator import (
    EnumerationConfig,
    PlanAlternative,
    canonical_form,
    enumerate_plans,
    plan_for,
    rank,
)
from .interpreter import generate_corpus, run
from .precedence import build_precedence
from .rewrite import QueryFacts, RewriteRule, RuleSession, parse_rule, read_write_conflicts

if TYPE_CHECKING:  # pragma: no cover
    from .presto import Taxonomy


class OptimizerMode(str, Enum):
    SOFA = "sofa"
    RW = "rw"
    FILTERPUSH = "filterpush"
    SISO = "siso"


RW_TEMPLATE = parse_rule(
    "reorder(X,Y) :- hasProperty(X,'single-in'), hasProperty(X,'RAAT'), "
    "hasProperty(Y,'single-in'), hasProperty(Y,'RAAT'), "
    "not readWriteConflicts(X,Y).")


class _RestrictedView:
    """Taxonomy proxy exposing a restricted rewrite-rule list."""

    def __init__(self, taxonomy: "Taxonomy", rules: list[RewriteRule]):
        self._t = taxonomy
        self.rewrite_rules = rules

    def __getattr__(self, name):
        return getattr(self._t, name)

    def static_reorder_table(self):
        return frozenset()


def _is_fanout_shaped(d: Dataflow) -> bool:
    """The flow shape RW refuses: fan-out anywhere or multiple sinks."""
    if len(d.sinks()) > 1:
        return True
    return any(len(d.out_edges(nid)) > 1 for nid in d.nodes)


def enumerate_rw(d: Dataflow, taxonomy: "Taxonomy", stats: StatsBundle,
                 cfg: Optional[EnumerationConfig] = None) -> list[PlanAlternative]:
    """Read/write-set reordering of record-at-a-time single-input operators;
    no complex-operator expansion; fan-out-shaped flows are returned as-is."""
    cfg = cfg or EnumerationConfig()
    if _is_fanout_shaped(d):
        return [plan_for(d, taxonomy, stats)]
    view = _RestrictedView(taxonomy, [RW_TEMPLATE])
    facts = QueryFacts.from_dataflow(d, taxonomy)
    session = RuleSession(view, facts)
    pg = build_precedence(d, taxonomy, facts, session)
    plans, _ = enumerate_plans(d, pg, taxonomy, stats, cfg)
    return plans


def _is_filter(taxonomy: "Taxonomy", d: Dataflow, nid: str) -> bool:
    n = d.node(nid)
    if n.kind != "op":
        return False
    concept = taxonomy.find(n.op)
    return concept is not None and "base:fltr" in taxonomy.ancestors(concept)


def enumerate_filterpush(d: Dataflow, taxonomy: "Taxonomy", stats: StatsBundle,
                         cfg: Optional[EnumerationConfig] = None,
                         ) -> list[PlanAlternative]:
    """Filter-movement heuristics only: precedence edges are removable iff
    one endpoint is a filter instance and the pair is conflict-free; every
    other operator keeps its original relative order."""
    cfg = cfg or EnumerationConfig()
    facts = QueryFacts.from_dataflow(d, taxonomy)

    def removable(u: str, v: str) -> bool:
        # dropping closure edge (u, v) lets v move before u: only allowed when
        # v is a filter (push toward the sources) or both ends are filters
        if not _is_filter(taxonomy, d, v):
            return False
        fu, fv = facts.instances.get(u), facts.instances.get(v)
        if fu is None or fv is None:
            return False
        return not read_write_conflicts(fu, fv)

    pg = build_precedence(d, taxonomy, facts,
                          keep_edge=lambda u, v: not removable(u, v),
                          session=_NullSession())
    plans, _ = enumerate_plans(d, pg, taxonomy, stats, cfg)
    return plans


class _NullSession:
    """Session whose reorder resolution always succeeds; used when the
    removal decision is fully delegated to a keep_edge predicate."""

    def resolve_reorder(self, u: str, v: str) -> bool:
        return True


def _siso_swappable(d: Dataflow, taxonomy: "Taxonomy", facts: QueryFacts,
                    u: str, v: str) -> bool:
    nu, nv = d.node(u), d.node(v)
    if nu.kind != "op" or nv.kind != "op":
        return False
    if len(d.in_edges(u)) != 1 or len(d.out_edges(u)) != 1:
        return False
    if len(d.in_edges(v)) != 1 or len(d.out_edges(v)) != 1:
        return False
    for nid in (u, v):
        concept = taxonomy.find(d.node(nid).op)
        if concept is None or not taxonomy.has_property(concept, "RAAT"):
            return False
    return not read_write_conflicts(facts.instances[u], facts.instances[v])


def _swap_adjacent(d: Dataflow, u: str, v: str) -> Dataflow:
    up = d.in_edges(u)[0]
    mid = d.out_edges(u)[0]
    down = d.out_edges(v)[0]
    keep = [e for e in d.edges if e not in (up, mid, down)]
    keep += [
        Edge(up.src, up.src_port, v, 0),
        Edge(v, 0, u, 0),
        Edge(u, 0, down.dst, down.dst_port),
    ]
    return Dataflow(d.ordered_nodes(), keep)


def enumerate_siso(d: Dataflow, taxonomy: "Taxonomy", stats: StatsBundle,
                   cfg: Optional[EnumerationConfig] = None) -> list[PlanAlternative]:
    """Closure of adjacent single-input/single-output conflict-free swaps."""
    cfg = cfg or EnumerationConfig()
    facts = QueryFacts.from_dataflow(d, taxonomy)
    start = plan_for(d, taxonomy, stats)
    seen = {start.canon}
    out = [start]
    frontier = [d]
    while frontier and len(out) < cfg.plan_limit:
        cur = frontier.pop(0)
        for e in sorted(cur.edges, key=lambda e: e.as_tuple()):
            if not _siso_swappable(cur, taxonomy, facts, e.src, e.dst):
                continue
            swapped = _swap_adjacent(cur, e.src, e.dst)
            if validate(swapped, taxonomy):
                continue
            canon = canonical_form(swapped, taxonomy)
            if canon in seen:
                continue
            seen.add(canon)
            alt = PlanAlternative(
                swapped, plan_cost(swapped, stats, taxonomy).total,
                (f"swap:{e.src}/{e.dst}",), canon)
            out.append(alt)
            frontier.append(swapped)
    return out


def enumerate_mode(mode: OptimizerMode, d: Dataflow, taxonomy: "Taxonomy",
                   stats: StatsBundle, cfg: Optional[EnumerationConfig] = None,
                   ) -> list[PlanAlternative]:
    cfg = cfg or EnumerationConfig()
    if mode == OptimizerMode.SOFA:
        from .enumerator import optimize
        res = optimize(d, taxonomy, stats, cfg)
        return res.plan_space()
    if mode == OptimizerMode.RW:
        return enumerate_rw(d, taxonomy, stats, cfg)
    if mode == OptimizerMode.FILTERPUSH:
        return enumerate_filterpush(d, taxonomy, stats, cfg)
    if mode == OptimizerMode.SISO:
        return enumerate_siso(d, taxonomy, stats, cfg)
    raise ValueError(f"unknown mode {mode}")


@dataclass
class ModeReport:
    mode: str
    plans: int
    plans_pruned: int
    best_cost: float
    runtime_units: Optional[int] = None


def compare_modes(d: Dataflow, taxonomy: "Taxonomy", stats: StatsBundle,
                  modes: list[OptimizerMode],
                  corpus_config: Optional[dict] = None,
                  sources: Optional[dict] = None,
                  seed: int = 42) -> list[ModeReport]:
    """Per mode: unpruned and pruned plan counts, best estimated cost, and
    the best plan's interpreter runtime on bound data or a seeded corpus."""
    reports = []
    if sources is None and corpus_config is not None:
        sources = {
            (n.ref or n.id): generate_corpus(corpus_config, seed + 7 * i)
            for i, n in enumerate(d.sources())}
    for mode in modes:
        unpruned = enumerate_mode(
            mode, d, taxonomy, stats, EnumerationConfig(prune=False))
        pruned = enumerate_mode(
            mode, d, taxonomy, stats, EnumerationConfig(prune=True))
        candidates = unpruned or [plan_for(d, taxonomy, stats)]
        best = rank(candidates)[0]
        units = None
        if sources is not None:
            _, trace = run(best.dataflow, sources, taxonomy)
            units = trace.units
        reports.append(ModeReport(
            mode=mode.value, plans=len(unpruned), plans_pruned=len(pruned),
            best_cost=best.cost, runtime_units=units))
    return reports


def reports_to_csv(reports: list[ModeReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["mode", "plans", "plansPruned", "bestCost", "runtimeUnits"])
    for r in reports:
        writer.writerow([r.mode, r.plans, r.plans_pruned,
                         f"{r.best_cost:.6f}",
                         "" if r.runtime_units is None else r.runtime_units])
    return buf.getvalue()
