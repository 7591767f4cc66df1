"""Per-query precedence graph: transitive closure of the dataflow minus
edges whose endpoints were proven reorderable."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Optional

from .dataflow import Dataflow, NodeId
from .rewrite import QueryFacts, RuleSession

if TYPE_CHECKING:  # pragma: no cover
    from .presto import Taxonomy


@dataclass
class PrecedenceGraph:
    """Directed must-precede constraints over the dataflow's nodes."""

    nodes: tuple[NodeId, ...]
    edges: frozenset[tuple[NodeId, NodeId]]
    removed: frozenset[tuple[NodeId, NodeId]] = frozenset()

    def successors(self, u: NodeId) -> list[NodeId]:
        return sorted(v for (a, v) in self.edges if a == u)

    def predecessors(self, v: NodeId) -> list[NodeId]:
        return sorted(u for (u, b) in self.edges if b == v)

    def has_edge(self, u: NodeId, v: NodeId) -> bool:
        return (u, v) in self.edges

    def to_dot(self, d: Optional[Dataflow] = None) -> str:
        """Stable DOT rendering (operator labels when the dataflow is given)."""
        lines = ["digraph precedence {", "  rankdir=LR;"]
        for n in self.nodes:
            label = n
            if d is not None and n in d.nodes:
                node = d.node(n)
                if node.kind == "op":
                    label = f"{n}\\n{node.op}"
                else:
                    label = f"{n}\\n({node.kind})"
            lines.append(f'  "{n}" [label="{label}"];')
        for (u, v) in sorted(self.edges):
            lines.append(f'  "{u}" -> "{v}";')
        lines.append("}")
        return "\n".join(lines)


def transitive_closure(d: Dataflow) -> PrecedenceGraph:
    """Floyd-Warshall reachability closure of the dataflow graph."""
    ids = sorted(d.nodes)
    index = {n: i for i, n in enumerate(ids)}
    n = len(ids)
    reach = [[False] * n for _ in range(n)]
    for e in d.edges:
        reach[index[e.src]][index[e.dst]] = True
    for k in range(n):
        rk = reach[k]
        for i in range(n):
            if reach[i][k]:
                ri = reach[i]
                for j in range(n):
                    if rk[j]:
                        ri[j] = True
    edges = frozenset(
        (ids[i], ids[j]) for i in range(n) for j in range(n) if reach[i][j])
    return PrecedenceGraph(tuple(ids), edges)


def build_precedence(d: Dataflow, taxonomy: "Taxonomy",
                     facts: Optional[QueryFacts] = None,
                     session: Optional[RuleSession] = None,
                     keep_edge: Optional[Callable[[NodeId, NodeId], bool]] = None,
                     ) -> PrecedenceGraph:
    """Closure minus edges (u,v) where reorder(u,v) resolves; edges incident
    to sources or sinks are always retained. ``keep_edge`` forces retention
    of specific edges (used by ablation tests)."""
    if facts is None:
        facts = QueryFacts.from_dataflow(d, taxonomy)
    if session is None:
        session = RuleSession(taxonomy, facts)
    closure = transitive_closure(d)
    endpoints = {n.id for n in d.sources()} | {n.id for n in d.sinks()}
    kept: set[tuple[NodeId, NodeId]] = set()
    removed: set[tuple[NodeId, NodeId]] = set()
    for (u, v) in sorted(closure.edges):
        if u in endpoints or v in endpoints:
            kept.add((u, v))
            continue
        if keep_edge is not None and keep_edge(u, v):
            kept.add((u, v))
            continue
        if session.resolve_reorder(u, v):
            removed.add((u, v))
        else:
            kept.add((u, v))
    return PrecedenceGraph(closure.nodes, frozenset(kept), frozenset(removed))


def is_linear_extension(d: Dataflow, pg: PrecedenceGraph) -> bool:
    """True iff the dataflow respects every precedence edge (u never a
    descendant of v for a must-precede edge (u,v))."""
    closure = transitive_closure(d)
    return not any((v, u) in closure.edges for (u, v) in pg.edges)
