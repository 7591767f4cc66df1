"""Recursive backward plan enumeration over the precedence graph with
cost-based pruning.

Plans are grown from the sink upward: a candidate is any precedence-graph
node without outgoing edges; adding it wires its output to the open inputs
of the partial plan. Nodes the candidate fed directly in the original
dataflow are required successors and are all wired at once; every other open
input is optional, and each optional successor branches the search with one
extra edge. Completions that violate schema or arity rules are discarded.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional

from .cost import StatsBundle, effective_selectivity, operator_cost, plan_cost
from .dataflow import Dataflow, Edge, NodeId, validate
from .precedence import PrecedenceGraph, build_precedence
from .rewrite import QueryFacts, RuleSession, match_structural

if TYPE_CHECKING:  # pragma: no cover
    from .presto import Taxonomy


@dataclass
class EnumerationConfig:
    prune: bool = True
    plan_limit: int = 200_000
    passes: str = "both"          # collapsed | expanded | both
    include_original: bool = False
    tighten_bound: bool = True    # tighten to best complete plan found so far
    structural: bool = True       # apply structural rewrite rules


@dataclass
class PlanAlternative:
    dataflow: Dataflow
    cost: float
    provenance: tuple[str, ...]
    canon: tuple = ()

    def __repr__(self) -> str:
        return f"PlanAlternative(cost={self.cost:.3f}, steps={len(self.provenance)})"


@dataclass
class EnumerationStats:
    selections: dict[int, int] = field(default_factory=dict)
    emitted: int = 0
    discarded: int = 0
    pruned: int = 0

    def record_selection(self, partial_size: int) -> None:
        self.selections[partial_size] = self.selections.get(partial_size, 0) + 1


# --------------------------------------------------------------------------
# canonical plan forms (isomorphism-aware dedup)
# --------------------------------------------------------------------------

def _node_label(d: Dataflow, taxonomy, nid: NodeId) -> str:
    n = d.node(nid)
    if n.kind == "source":
        return json.dumps(["source", n.ref or "", sorted(str(p) for p in n.schema)])
    if n.kind == "sink":
        return json.dumps(["sink", n.name or ""])
    return json.dumps([
        "op", n.op, json.dumps(n.config, sort_keys=True),
        sorted(str(p) for p in n.reads),
        sorted([str(w.path), w.mode] for w in n.writes)])


def _port_symmetric(taxonomy, d: Dataflow, nid: NodeId) -> bool:
    n = d.node(nid)
    if n.kind != "op":
        return False
    concept = taxonomy.find(n.op)
    impl = taxonomy.impl_for(concept) if concept else None
    if impl is None or not impl.port_symmetric:
        return False
    on = n.config.get("on")
    if isinstance(on, list) and len(on) == 2 and on[0] != on[1]:
        return False
    return True


def canonical_form(d: Dataflow, taxonomy) -> tuple:
    """Order-independent form of a plan; symmetric multi-input operators are
    insensitive to port permutation."""
    sig = {nid: _node_label(d, taxonomy, nid) for nid in d.nodes}
    symmetric = {nid: _port_symmetric(taxonomy, d, nid) for nid in d.nodes}
    for _ in range(len(d.nodes)):
        nxt = {}
        for nid in d.nodes:
            outs = sorted(
                ((-1 if symmetric[e.dst] else e.dst_port), sig[e.dst])
                for e in d.out_edges(nid))
            ins = sorted(
                ((-1 if symmetric[nid] else e.dst_port), sig[e.src])
                for e in d.in_edges(nid))
            blob = json.dumps([sig[nid], outs, ins])
            nxt[nid] = hashlib.sha1(blob.encode()).hexdigest()
        sig = nxt
    edges = sorted(
        (sig[e.src], e.src_port,
         sig[e.dst], -1 if symmetric[e.dst] else e.dst_port)
        for e in d.edges)
    return (tuple(edges), tuple(sorted(sig.values())))


# --------------------------------------------------------------------------
# enumeration
# --------------------------------------------------------------------------

class _StopSearch(Exception):
    pass


class _Enumerator:
    def __init__(self, d: Dataflow, pg: PrecedenceGraph, taxonomy,
                 stats: StatsBundle, cfg: EnumerationConfig,
                 bound: Optional[float]):
        self.d = d
        self.taxonomy = taxonomy
        self.stats = stats
        self.cfg = cfg
        self.enum_stats = EnumerationStats()
        self.seen: dict[tuple, int] = {}
        self.plans: list[PlanAlternative] = []
        self.bound = bound
        self.arity = {nid: len(d.in_edges(nid)) for nid in d.nodes}
        self.orig_port: dict[tuple[NodeId, NodeId], int] = {}
        for e in d.edges:
            self.orig_port.setdefault((e.src, e.dst), e.dst_port)
        self.succ0 = {nid: set(pg.successors(nid)) for nid in pg.nodes}
        self.pred0 = {nid: set(pg.predecessors(nid)) for nid in pg.nodes}
        explicit = set(stats.operators)
        self.node_sel = {
            n.id: effective_selectivity(d, n.id, stats, explicit)
            for n in d.operators()}
        shrink = 1.0
        for s in self.node_sel.values():
            if s < 1.0:
                shrink *= s
        src_sizes = [stats.sources.get(n.id, stats.sources.get(n.ref or n.id, 0.0))
                     for n in d.sources()]
        self.r_lb = (min(src_sizes) if src_sizes else 0.0) * shrink

    # -- admissible partial-plan bound --------------------------------------
    def _lower_bound(self, placed: tuple[NodeId, ...]) -> float:
        total = 0.0
        for nid in placed:
            node = self.d.node(nid)
            if node.kind != "op":
                continue
            st = self.stats.for_node(nid)
            st_eff = replace(st, sel=self.node_sel.get(nid, st.sel))
            concept = self.taxonomy.find(node.op)
            hook = self.taxonomy.cost_hook(concept) if concept else None
            total += operator_cost(nid, self.r_lb, st_eff,
                                   self.stats.weights, hook).total
        return total

    def _prune(self, placed: tuple[NodeId, ...]) -> bool:
        if not self.cfg.prune or self.bound is None:
            return False
        if self._lower_bound(placed) > self.bound * (1 + 1e-12) + 1e-9:
            self.enum_stats.pruned += 1
            return True
        return False

    # -- search --------------------------------------------------------------
    def run(self) -> list[PlanAlternative]:
        succ = {k: set(v) for k, v in self.succ0.items()}
        pred = {k: set(v) for k, v in self.pred0.items()}
        try:
            self._recurse(succ, pred, (), (), {})
        except _StopSearch:
            pass
        return self.plans

    def _recurse(self, succ, pred, placed: tuple, edges: tuple, open_ports: dict):
        if not succ:
            self._emit(placed, edges)
            return
        candidates = sorted(n for n, s in succ.items() if not s)
        for n in candidates:
            self.enum_stats.record_selection(len(placed) + 1)
            succ2 = {k: set(v) for k, v in succ.items() if k != n}
            pred2 = {}
            for k, v in pred.items():
                if k == n:
                    continue
                pred2[k] = set(v)
                pred2[k].discard(n)
            for k in succ2:
                succ2[k].discard(n)
            opens = sorted(nid for nid, ports in open_ports.items() if ports)
            node = self.d.node(n)
            new_open = dict(open_ports)
            if self.arity[n] > 0:
                new_open[n] = list(range(self.arity[n]))
            if not opens or node.kind == "sink":
                if placed and node.kind != "sink":
                    continue  # output would dangle
                if not self._prune(placed + (n,)):
                    self._recurse(succ2, pred2, placed + (n,),
                                  edges, new_open)
                continue
            required = [m for m in opens if (n, m) in self.orig_port]
            optionals = [m for m in opens if m not in required]
            base_edges, base_open = self._wire_required(n, required, edges, new_open)
            if required and not optionals:
                self._branch(succ2, pred2, placed + (n,), base_edges, base_open,
                             note=f"{n}->req")
            elif required and optionals:
                for l in optionals:
                    e2, o2 = self._wire_one(n, l, base_edges, base_open)
                    self._branch(succ2, pred2, placed + (n,), e2, o2,
                                 note=f"{n}->req+{l}")
            else:
                for l in optionals:
                    e2, o2 = self._wire_one(n, l, edges, new_open)
                    self._branch(succ2, pred2, placed + (n,), e2, o2,
                                 note=f"{n}->{l}")

    def _wire_required(self, n, required, edges, open_ports):
        e, o = edges, dict(open_ports)
        for m in required:
            ports = list(o[m])
            want = self.orig_port.get((n, m))
            port = want if want in ports else ports[0]
            ports.remove(port)
            o[m] = ports
            e = e + (Edge(n, 0, m, port),)
        return e, o

    def _wire_one(self, n, l, edges, open_ports):
        o = dict(open_ports)
        ports = list(o[l])
        port = ports.pop(0)
        o[l] = ports
        return edges + (Edge(n, 0, l, port),), o

    def _branch(self, succ, pred, placed, edges, open_ports, note: str):
        if self._prune(placed):
            return
        self._recurse(succ, pred, placed, edges, open_ports)

    def _emit(self, placed: tuple, edges: tuple):
        if any(self.arity[nid] != sum(1 for e in edges if e.dst == nid)
               for nid in self.d.nodes):
            self.enum_stats.discarded += 1
            return
        plan = Dataflow(self.d.ordered_nodes(), list(edges))
        for nid in plan.nodes:
            if plan.node(nid).kind != "sink" and not plan.out_edges(nid):
                self.enum_stats.discarded += 1
                return
        if validate(plan, self.taxonomy):
            self.enum_stats.discarded += 1
            return
        canon = canonical_form(plan, self.taxonomy)
        if canon in self.seen:
            return
        self.seen[canon] = len(self.plans)
        cost = plan_cost(plan, self.stats, self.taxonomy).total
        provenance = tuple(reversed(placed))
        self.plans.append(PlanAlternative(plan, cost, provenance, canon))
        self.enum_stats.emitted += 1
        if self.cfg.tighten_bound and self.cfg.prune:
            if self.bound is None or cost < self.bound:
                self.bound = cost
        if len(self.plans) >= self.cfg.plan_limit:
            raise _StopSearch()


def plan_for(d: Dataflow, taxonomy, stats: StatsBundle,
             provenance: tuple[str, ...] = ("original",)) -> PlanAlternative:
    return PlanAlternative(d, plan_cost(d, stats, taxonomy).total, provenance,
                           canonical_form(d, taxonomy))


def enumerate_plans(d: Dataflow, pg: PrecedenceGraph, taxonomy,
                    stats: StatsBundle, cfg: Optional[EnumerationConfig] = None,
                    ) -> tuple[list[PlanAlternative], EnumerationStats]:
    """All plan alternatives derivable from the precedence graph.

    With pruning enabled, the search abandons partial plans whose admissible
    cost lower bound already exceeds the best known complete plan (seeded
    with the original plan's cost). The original plan is appended to the
    result when ``cfg.include_original`` and it was not re-derived."""
    cfg = cfg or EnumerationConfig()
    bound = plan_cost(d, stats, taxonomy).total if cfg.prune else None
    enums = _Enumerator(d, pg, taxonomy, stats, cfg, bound)
    plans = enums.run()
    if cfg.include_original:
        orig = plan_for(d, taxonomy, stats)
        if orig.canon not in enums.seen:
            plans = plans + [orig]
    return plans, enums.enum_stats


def rank(plans: list[PlanAlternative]) -> list[PlanAlternative]:
    """Ascending by estimated cost; stable (provenance order preserved)."""
    return sorted(plans, key=lambda p: p.cost)


# --------------------------------------------------------------------------
# the full optimization pipeline
# --------------------------------------------------------------------------

class OptimizeError(ValueError):
    def __init__(self, violations):
        super().__init__("; ".join(str(v) for v in violations))
        self.violations = violations


@dataclass
class PassResult:
    name: str
    flows: list[Dataflow]
    plans: list[PlanAlternative]
    stats: EnumerationStats
    precedence: PrecedenceGraph


@dataclass
class OptimizeResult:
    best: PlanAlternative
    original: PlanAlternative
    passes: dict[str, PassResult]

    def plan_space(self, name: Optional[str] = None) -> list[PlanAlternative]:
        if name is not None:
            return self.passes[name].plans
        seen, out = set(), []
        for p in self.passes.values():
            for alt in p.plans:
                if alt.canon not in seen:
                    seen.add(alt.canon)
                    out.append(alt)
        return out


def _structural_closure(d: Dataflow, taxonomy, limit: int = 24) -> list[Dataflow]:
    flows = [d]
    seen = {canonical_form(d, taxonomy)}
    frontier = [d]
    while frontier and len(flows) < limit:
        cur = frontier.pop(0)
        for m in match_structural(taxonomy, cur):
            c = canonical_form(m.rewritten, taxonomy)
            if c not in seen:
                seen.add(c)
                flows.append(m.rewritten)
                frontier.append(m.rewritten)
    return flows


def enumerate_pass(name: str, flow: Dataflow, taxonomy, stats: StatsBundle,
                   cfg: EnumerationConfig) -> PassResult:
    flows = _structural_closure(flow, taxonomy) if cfg.structural else [flow]
    all_plans: list[PlanAlternative] = []
    seen: set = set()
    agg = EnumerationStats()
    pg_main: Optional[PrecedenceGraph] = None
    for i, f in enumerate(flows):
        facts = QueryFacts.from_dataflow(f, taxonomy)
        session = RuleSession(taxonomy, facts)
        pg = build_precedence(f, taxonomy, facts, session)
        if pg_main is None:
            pg_main = pg
        plans, st = enumerate_plans(f, pg, taxonomy, stats, cfg)
        if i == 0:
            agg = st
        for p in plans:
            if p.canon not in seen:
                seen.add(p.canon)
                all_plans.append(p)
    return PassResult(name, flows, all_plans, agg, pg_main)


def optimize(d: Dataflow, taxonomy, stats: StatsBundle,
             cfg: Optional[EnumerationConfig] = None) -> OptimizeResult:
    """Two-pass optimization: precedence analysis, enumeration and ranking on
    the collapsed flow, then on the complex-operator expansion; returns the
    overall cheapest plan (deterministic tie-break by pass then emission
    order)."""
    cfg = cfg or EnumerationConfig()
    violations = validate(d, taxonomy)
    if violations:
        raise OptimizeError(violations)
    passes: dict[str, PassResult] = {}
    if cfg.passes in ("collapsed", "both"):
        passes["collapsed"] = enumerate_pass("collapsed", d, taxonomy, stats, cfg)
    if cfg.passes in ("expanded", "both"):
        expanded = taxonomy.expand_complex(d)
        if cfg.passes == "expanded" or not expanded.structurally_equal(d):
            passes["expanded"] = enumerate_pass("expanded", expanded, taxonomy,
                                                stats, cfg)
    original = plan_for(d, taxonomy, stats)
    best = original
    for pr in passes.values():
        for p in pr.plans:
            if p.cost < best.cost:
                best = p
    return OptimizeResult(best=best, original=original, passes=passes)
