"""Dataflow graphs: sources, operator instances, sinks, validation, schemas."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Optional

from .datamodel import (
    AttributePath,
    EMPTY_SCHEMA,
    SchemaDescriptor,
    parse_paths,
    schema_contains,
)

if TYPE_CHECKING:  # pragma: no cover
    from .presto import Taxonomy

NodeId = str


class DataflowError(ValueError):
    pass


@dataclass(frozen=True)
class WriteDecl:
    path: AttributePath
    mode: str = "set"  # set | append


@dataclass(frozen=True)
class Node:
    id: NodeId
    kind: str                      # source | sink | op
    op: Optional[str] = None       # taxonomy concept id (op nodes)
    config: dict = field(default_factory=dict)
    reads: frozenset[AttributePath] = frozenset()
    writes: tuple[WriteDecl, ...] = ()
    ref: Optional[str] = None      # dataset reference (sources)
    name: Optional[str] = None     # sink name
    schema: frozenset[AttributePath] = frozenset()  # declared source attrs

    @property
    def write_paths(self) -> frozenset[AttributePath]:
        return frozenset(w.path for w in self.writes)

    @property
    def append_paths(self) -> frozenset[AttributePath]:
        return frozenset(w.path for w in self.writes if w.mode == "append")

    def required_reads(self) -> frozenset[AttributePath]:
        """Hard input requirements: reads minus append-mode write targets
        (append targets may be absent and get bootstrapped)."""
        appendable = self.append_paths
        return frozenset(p for p in self.reads if p not in appendable)


@dataclass(frozen=True)
class Edge:
    src: NodeId
    src_port: int
    dst: NodeId
    dst_port: int

    def as_tuple(self) -> tuple:
        return (self.src, self.src_port, self.dst, self.dst_port)


@dataclass(frozen=True)
class Violation:
    rule: str
    where: str
    detail: str

    def __str__(self) -> str:
        return f"[{self.rule}] {self.where}: {self.detail}"


class Dataflow:
    """A directed acyclic graph of sources, operator instances and sinks."""

    def __init__(self, nodes: list[Node], edges: list[Edge]) -> None:
        self.nodes: dict[NodeId, Node] = {}
        for n in nodes:
            if n.id in self.nodes:
                raise DataflowError(f"duplicate node id {n.id!r}")
            self.nodes[n.id] = n
        self.edges: tuple[Edge, ...] = tuple(
            sorted(edges, key=lambda e: e.as_tuple()))

    # -- structure helpers -------------------------------------------------
    def node(self, nid: NodeId) -> Node:
        return self.nodes[nid]

    def in_edges(self, nid: NodeId) -> list[Edge]:
        return sorted((e for e in self.edges if e.dst == nid),
                      key=lambda e: e.dst_port)

    def out_edges(self, nid: NodeId) -> list[Edge]:
        return sorted((e for e in self.edges if e.src == nid),
                      key=lambda e: e.as_tuple())

    def sources(self) -> list[Node]:
        return [n for n in self.ordered_nodes() if n.kind == "source"]

    def sinks(self) -> list[Node]:
        return [n for n in self.ordered_nodes() if n.kind == "sink"]

    def operators(self) -> list[Node]:
        return [n for n in self.ordered_nodes() if n.kind == "op"]

    def ordered_nodes(self) -> list[Node]:
        return [self.nodes[k] for k in sorted(self.nodes)]

    def successors(self, nid: NodeId) -> list[NodeId]:
        return sorted({e.dst for e in self.edges if e.src == nid})

    def predecessors(self, nid: NodeId) -> list[NodeId]:
        return sorted({e.src for e in self.edges if e.dst == nid})

    def has_edge(self, u: NodeId, v: NodeId) -> bool:
        return any(e.src == u and e.dst == v for e in self.edges)

    def replace_node(self, node: Node) -> "Dataflow":
        nodes = [node if n.id == node.id else n for n in self.ordered_nodes()]
        return Dataflow(nodes, list(self.edges))

    # -- serialization -----------------------------------------------------
    @staticmethod
    def from_json(text: str) -> "Dataflow":
        return Dataflow.from_dict(json.loads(text))

    @staticmethod
    def from_dict(doc: dict) -> "Dataflow":
        nodes = []
        for nd in doc.get("nodes", []):
            kind = nd.get("kind")
            if kind not in ("source", "sink", "op"):
                raise DataflowError(f"unknown node kind {kind!r}")
            writes = tuple(
                WriteDecl(AttributePath.parse(w["path"]), w.get("mode", "set"))
                for w in nd.get("writes", ()))
            nodes.append(Node(
                id=nd["id"],
                kind=kind,
                op=nd.get("op"),
                config=nd.get("config", {}),
                reads=parse_paths(nd.get("reads", ())),
                writes=writes,
                ref=nd.get("ref"),
                name=nd.get("name"),
                schema=parse_paths(nd.get("schema", ())),
            ))
        edges = [
            Edge(e["from"], e.get("fromPort", 0), e["to"], e.get("toPort", 0))
            for e in doc.get("edges", [])
        ]
        return Dataflow(nodes, edges)

    def to_dict(self) -> dict:
        nodes = []
        for n in self.ordered_nodes():
            nd: dict = {"id": n.id, "kind": n.kind}
            if n.op is not None:
                nd["op"] = n.op
            if n.config:
                nd["config"] = n.config
            if n.reads:
                nd["reads"] = sorted(str(p) for p in n.reads)
            if n.writes:
                nd["writes"] = [
                    {"path": str(w.path), "mode": w.mode}
                    for w in sorted(n.writes, key=lambda w: (str(w.path), w.mode))
                ]
            if n.ref is not None:
                nd["ref"] = n.ref
            if n.name is not None:
                nd["name"] = n.name
            if n.schema:
                nd["schema"] = sorted(str(p) for p in n.schema)
            nodes.append(nd)
        edges = [
            {"from": e.src, "fromPort": e.src_port, "to": e.dst, "toPort": e.dst_port}
            for e in self.edges
        ]
        return {"nodes": nodes, "edges": edges}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def structurally_equal(self, other: "Dataflow") -> bool:
        return self.to_dict() == other.to_dict()


def topological_order(d: Dataflow) -> list[NodeId]:
    """Deterministic topological order (ties broken by node id)."""
    if not d.nodes:
        raise DataflowError("empty dataflow")
    indeg = {nid: 0 for nid in d.nodes}
    for e in d.edges:
        indeg[e.dst] += 1
    ready = sorted(nid for nid, k in indeg.items() if k == 0)
    out: list[NodeId] = []
    while ready:
        nid = ready.pop(0)
        out.append(nid)
        changed = False
        for e in d.out_edges(nid):
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                ready.append(e.dst)
                changed = True
        if changed:
            ready.sort()
    if len(out) != len(d.nodes):
        raise DataflowError("dataflow contains a cycle")
    return out


@dataclass(frozen=True)
class PortSchema:
    node: NodeId
    port: int
    direction: str  # in | out
    schema: SchemaDescriptor


def propagate_schemas(d: Dataflow, taxonomy: "Taxonomy") -> dict[tuple, SchemaDescriptor]:
    """Forward schema propagation in topological order.

    Returns a map (node, port, direction) -> SchemaDescriptor. Output schema
    of an operator = union of input schemas transformed per its taxonomy
    schema behavior (preserving: unchanged; otherwise input minus the paths
    the implementation removes, plus the declared write set).
    """
    order = topological_order(d)
    schemas: dict[tuple, SchemaDescriptor] = {}
    for nid in order:
        n = d.node(nid)
        if n.kind == "source":
            schemas[(nid, 0, "out")] = SchemaDescriptor(n.schema)
            continue
        ins = d.in_edges(nid)
        in_union = EMPTY_SCHEMA
        for e in ins:
            up = schemas.get((e.src, e.src_port, "out"))
            if up is None:
                raise DataflowError(f"unconnected upstream port feeding {nid}")
            schemas[(nid, e.dst_port, "in")] = up
            in_union = in_union.union(up)
        if n.kind == "sink":
            schemas[(nid, 0, "sink")] = in_union
            continue
        if not ins:
            raise DataflowError(f"operator {nid} has no connected inputs")
        out = taxonomy.output_schema(n, in_union)
        schemas[(nid, 0, "out")] = out
    return schemas


def validate(d: Dataflow, taxonomy: "Taxonomy") -> list[Violation]:
    """All invariant violations; empty list means the dataflow is valid."""
    v: list[Violation] = []
    if not d.nodes:
        return [Violation("non-empty", "-", "dataflow has no nodes")]
    for e in d.edges:
        for end in (e.src, e.dst):
            if end not in d.nodes:
                v.append(Violation("edge-endpoints", f"{e.src}->{e.dst}",
                                   f"unknown node {end!r}"))
    if any(x.rule == "edge-endpoints" for x in v):
        return v

    # acyclicity
    try:
        topological_order(d)
        acyclic = True
    except DataflowError as exc:
        v.append(Violation("acyclic", "-", str(exc)))
        acyclic = False

    # sources / sinks / degree rules
    if not d.sources():
        v.append(Violation("has-source", "-", "no source node"))
    if not d.sinks():
        v.append(Violation("has-sink", "-", "no sink node"))
    for n in d.ordered_nodes():
        ins, outs = d.in_edges(n.id), d.out_edges(n.id)
        if n.kind == "source" and ins:
            v.append(Violation("source-no-in", n.id, "source has incoming edges"))
        if n.kind == "sink" and outs:
            v.append(Violation("sink-no-out", n.id, "sink has outgoing edges"))
        if n.kind == "sink" and len(ins) != 1:
            v.append(Violation("sink-arity", n.id,
                               f"sink needs exactly 1 input, has {len(ins)}"))
        if n.kind != "sink" and not outs:
            v.append(Violation("connected-out", n.id, "output is not consumed"))
        if n.kind == "op":
            if n.op is None:
                v.append(Violation("op-concept", n.id, "missing operator concept"))
                continue
            concept = taxonomy.find(n.op)
            if concept is None:
                v.append(Violation("op-known", n.id, f"unknown operator {n.op!r}"))
                continue
            if taxonomy.operator_kind(concept) == "abstract":
                v.append(Violation("op-concrete", n.id,
                                   f"{n.op!r} is abstract, instances need a concrete operator"))
                continue
            arity = taxonomy.input_arity(concept)
            ports = sorted(e.dst_port for e in ins)
            if arity is not None and ports != list(range(arity)):
                v.append(Violation("input-arity", n.id,
                                   f"expects {arity} connected input ports, has {ports}"))
            elif ports != list(range(len(ports))):
                v.append(Violation("input-ports", n.id,
                                   f"input ports must be dense from 0, got {ports}"))
    # each input port exactly one incoming edge
    seen: dict[tuple, int] = {}
    for e in d.edges:
        seen[(e.dst, e.dst_port)] = seen.get((e.dst, e.dst_port), 0) + 1
    for (nid, port), k in sorted(seen.items()):
        if k > 1:
            v.append(Violation("single-feed", nid, f"input port {port} fed {k} times"))

    # connectedness (undirected)
    if d.nodes:
        nids = sorted(d.nodes)
        adj: dict[str, set[str]] = {nid: set() for nid in nids}
        for e in d.edges:
            adj[e.src].add(e.dst)
            adj[e.dst].add(e.src)
        stack, reached = [nids[0]], {nids[0]}
        while stack:
            for m in adj[stack.pop()]:
                if m not in reached:
                    reached.add(m)
                    stack.append(m)
        if reached != set(nids):
            v.append(Violation("connected", "-",
                               f"unreachable nodes: {sorted(set(nids) - reached)}"))

    if v or not acyclic:
        return v

    # schema containment along every edge
    try:
        schemas = propagate_schemas(d, taxonomy)
    except DataflowError as exc:
        return [Violation("schemas", "-", str(exc))]
    for e in d.edges:
        dst = d.node(e.dst)
        if dst.kind != "op":
            continue
        produced = schemas[(e.src, e.src_port, "out")]
        required = SchemaDescriptor(taxonomy.required_input(dst))
        port_reqs = dst.config.get("portRequires")
        if port_reqs is not None and e.dst_port < len(port_reqs):
            required = SchemaDescriptor(parse_paths(port_reqs[e.dst_port]))
        if not schema_contains(produced, required):
            missing = sorted(str(p) for p in required.attributes
                             if not produced.covers(p))
            v.append(Violation("schema", f"{e.src}->{e.dst}",
                               f"consumer requires {missing} not produced upstream"))
    return v
