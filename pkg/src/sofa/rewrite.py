"""Rule engine resolving reorder(X,Y) goals over the operator taxonomy.

Rules are written in a Datalog-like syntax inside ``.presto`` package files::

    rule reorder(X,X) :- hasProperty(X,'commutative').
    rule reorder(X,Y) :- not hasPrerequisite(Y,X), isA(X,Z), reorder(Z,Y).

Resolution is top-down with memoization. Goals are instantiated over
concept pairs generalized along isA ancestors; negated prerequisites and all
dynamic predicates (attribute access, schemas) are pinned to the original,
most specific concept or instance so generalization never weakens a guard.
The body atom hasPrerequisite(A,B) reads "A requires B", i.e. B must run
first.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from .datamodel import AttributePath, SchemaDescriptor, schema_contains
from .dataflow import Dataflow, Node, propagate_schemas

if TYPE_CHECKING:  # pragma: no cover
    from .presto import Taxonomy

DYNAMIC_PREDICATES = {"readWriteConflicts", "accessedFields", "S_out",
                      "readSet", "writeSet", "contains"}
BASE_PREDICATES = {"isA", "hasProperty", "hasPrerequisite"} | DYNAMIC_PREDICATES


class RuleError(ValueError):
    pass


# --------------------------------------------------------------------------
# rule syntax
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Const:
    value: object  # concept id, property name, or bound fact value

    def __str__(self) -> str:
        return repr(self.value)


@dataclass(frozen=True)
class RuleAtom:
    pred: str
    args: tuple

    def __str__(self) -> str:
        return f"{self.pred}({', '.join(map(str, self.args))})"


@dataclass(frozen=True)
class Literal:
    atom: RuleAtom
    negated: bool = False

    def __str__(self) -> str:
        return ("not " if self.negated else "") + str(self.atom)


@dataclass
class RewriteRule:
    head: RuleAtom
    body: tuple[Literal, ...]
    source: str = ""

    @property
    def phase(self) -> str:
        """static if evaluable at package load, dynamic if it needs query facts."""
        return "dynamic" if any(l.atom.pred in DYNAMIC_PREDICATES for l in self.body) \
            else "static"

    def __str__(self) -> str:
        return f"{self.head} :- {', '.join(map(str, self.body))}."


_TOKEN = re.compile(r"""
    \s*(?:
      (?P<quoted>'[^']*') |
      (?P<name>[A-Za-z_][A-Za-z0-9_\-]*) |
      (?P<punct>:-|[(),.\[\]])
    )""", re.VERBOSE)


def _tokenize(text: str) -> list[str]:
    out, pos = [], 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            if text[pos:].strip():
                raise RuleError(f"cannot tokenize near: {text[pos:pos + 20]!r}")
            break
        out.append(m.group("quoted") or m.group("name") or m.group("punct"))
        pos = m.end()
    return out


def _parse_atom(toks: list[str], i: int) -> tuple[RuleAtom, int]:
    pred = toks[i]
    if toks[i + 1] != "(":
        raise RuleError(f"expected '(' after {pred}")
    args: list = []
    i += 2
    while toks[i] != ")":
        t = toks[i]
        if t == ",":
            i += 1
            continue
        if t.startswith("'"):
            args.append(Const(t[1:-1]))
        elif t[0].isupper():
            args.append(Var(t))
        else:
            args.append(Const(t))
        i += 1
    return RuleAtom(pred, tuple(args)), i + 1


def parse_rule(text: str) -> RewriteRule:
    """Parse one ``head :- body.`` rule."""
    toks = _tokenize(text.strip().rstrip("."))
    head, i = _parse_atom(toks, 0)
    if head.pred != "reorder":
        raise RuleError(f"rule heads must be reorder/2, got {head.pred}")
    if len(head.args) != 2:
        raise RuleError("reorder takes exactly two arguments")
    body: list[Literal] = []
    if i < len(toks):
        if toks[i] != ":-":
            raise RuleError("expected ':-' after rule head")
        i += 1
        while i < len(toks):
            if toks[i] == ",":
                i += 1
                continue
            negated = toks[i] == "not"
            if negated:
                i += 1
            atom, i = _parse_atom(toks, i)
            body.append(Literal(atom, negated))
    rule = RewriteRule(head, tuple(body), source=text.strip())
    _check_rule(rule)
    return rule


def _check_rule(rule: RewriteRule) -> None:
    # safety: every head variable appears in a positive body literal or is
    # shared with the other head position (reorder(X,X)).
    head_vars = {a.name for a in rule.head.args if isinstance(a, Var)}
    positive = {a.name for l in rule.body if not l.negated
                for a in l.atom.args if isinstance(a, Var)}
    # head variables of reorder are bound by the goal itself, so they are safe;
    # but body-only variables in negated literals are not.
    for l in rule.body:
        if not l.negated:
            continue
        for a in l.atom.args:
            if isinstance(a, Var) and a.name not in head_vars and a.name not in positive:
                raise RuleError(f"unsafe negated variable {a.name} in: {rule.source}")
    for l in rule.body:
        if l.atom.pred not in BASE_PREDICATES and l.atom.pred != "reorder":
            raise RuleError(f"unknown predicate {l.atom.pred!r} in: {rule.source}")
        if l.negated and l.atom.pred == "reorder":
            raise RuleError(f"negated reorder is not stratified: {rule.source}")


# --------------------------------------------------------------------------
# query-time facts
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class InstanceFacts:
    node_id: str
    concept: str
    reads: frozenset[AttributePath]
    writes: frozenset[AttributePath]
    write_modes: tuple[tuple[AttributePath, str], ...]
    out_schema: SchemaDescriptor
    arity: int

    @property
    def accessed(self) -> frozenset[AttributePath]:
        return self.reads | self.writes

    def mode_of(self, p: AttributePath) -> str:
        for q, m in self.write_modes:
            if q == p:
                return m
        return "set"


class QueryFacts:
    """Per-instance facts derived from a concrete dataflow."""

    def __init__(self, instances: dict[str, InstanceFacts]) -> None:
        self.instances = instances

    @staticmethod
    def from_dataflow(d: Dataflow, taxonomy: "Taxonomy") -> "QueryFacts":
        schemas = propagate_schemas(d, taxonomy)
        inst: dict[str, InstanceFacts] = {}
        for n in d.operators():
            concept = taxonomy.find(n.op)
            reads, writes = taxonomy.effective_access(n)
            inst[n.id] = InstanceFacts(
                node_id=n.id,
                concept=concept,
                reads=frozenset(reads),
                writes=frozenset(w.path for w in writes),
                write_modes=tuple(sorted(((w.path, w.mode) for w in writes),
                                         key=lambda t: (str(t[0]), t[1]))),
                out_schema=schemas[(n.id, 0, "out")],
                arity=len(d.in_edges(n.id)),
            )
        return QueryFacts(inst)


def read_write_conflicts(x: InstanceFacts, y: InstanceFacts) -> bool:
    """Attribute-level conflict test with the add-only exception: two
    append-mode writes to the same path do not conflict."""
    for p in x.writes:
        for q in y.reads:
            if p.overlaps(q):
                return True
    for p in x.reads:
        for q in y.writes:
            if p.overlaps(q):
                return True
    for p in x.writes:
        for q in y.writes:
            if not p.overlaps(q):
                continue
            if p == q and x.mode_of(p) == "append" and y.mode_of(q) == "append":
                continue
            return True
    return False


# --------------------------------------------------------------------------
# resolution
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Operand:
    """A reorder-goal operand: a (possibly generalized) concept plus the
    original concepts and instances it stands for."""

    concept: str
    origins: tuple[str, ...]
    insts: tuple[str, ...] = ()  # instance node ids

    def key(self):
        return (self.concept, self.origins, self.insts)


@dataclass
class Derivation:
    goal: str
    rule: Optional[str] = None
    children: list = field(default_factory=list)
    note: str = ""

    def render(self, indent: int = 0) -> str:
        pad = "  " * indent
        line = f"{pad}{self.goal}"
        if self.rule:
            line += f"   via {self.rule}"
        if self.note:
            line += f"   [{self.note}]"
        out = [line]
        for c in self.children:
            out.append(c.render(indent + 1))
        return "\n".join(out)


class RuleSession:
    """One optimization session: memoized reorder resolution over a frozen
    taxonomy plus (optional) query facts."""

    def __init__(self, taxonomy: "Taxonomy", facts: Optional[QueryFacts] = None):
        self.t = taxonomy
        self.facts = facts
        self.memo: dict = {}
        self._static = None
        # without query facts, dynamic rules can never fire
        self.rules = list(taxonomy.rewrite_rules) if facts is not None else [
            r for r in taxonomy.rewrite_rules if r.phase == "static"]

    # -- public entry points ----------------------------------------------
    def resolve_reorder(self, x_node: str, y_node: str) -> bool:
        ok, _ = self.resolve_with_trace(x_node, y_node)
        return ok

    def resolve_with_trace(self, x_node: str, y_node: str):
        fx, fy = self._inst(x_node), self._inst(y_node)
        cx, cy = fx.concept, fy.concept
        if self.static_table() and (cx, cy) in self.static_table():
            return True, Derivation(f"reorder({cx},{cy})", note="static table")
        return self._drive(cx, cy, (x_node,), (y_node,))

    def resolve_concepts(self, cx: str, cy: str):
        """Concept-level resolution (no query facts) used for the static table."""
        return self._drive(cx, cy, (), ())

    def static_table(self) -> frozenset:
        if self._static is None:
            self._static = self.t.static_reorder_table()
        return self._static

    # -- internals ----------------------------------------------------------
    def _inst(self, node_id: str) -> InstanceFacts:
        if self.facts is None or node_id not in self.facts.instances:
            raise RuleError(f"no query facts for instance {node_id!r}")
        return self.facts.instances[node_id]

    def _drive(self, cx: str, cy: str, ix: tuple, iy: tuple):
        attempts = []
        for gx in sorted(self.t.ancestors(cx)):
            for gy in sorted(self.t.ancestors(cy)):
                goal = RuleAtom("reorder", (
                    Operand(gx, (cx,), ix), Operand(gy, (cy,), iy)))
                d = self._prove(goal, frozenset())
                if d is not None:
                    return True, d
                attempts.append(f"reorder({gx},{gy})")
        fail = Derivation(f"reorder({cx},{cy})", note="no derivation")
        fail.children = [Derivation(a, note="failed") for a in attempts[:8]]
        return False, fail

    def _goal_key(self, atom: RuleAtom):
        return (atom.pred, tuple(
            a.key() if isinstance(a, Operand) else ("c", repr(a))
            for a in atom.args))

    def _prove(self, atom: RuleAtom, in_progress: frozenset) -> Optional[Derivation]:
        key = self._goal_key(atom)
        if key in self.memo:
            return self.memo[key]
        if key in in_progress:
            return None  # structural recursion bottoms out
        if atom.pred != "reorder":
            ok = self._eval_base(atom)
            return Derivation(str(atom), note="fact") if ok else None
        running = in_progress | {key}
        for rule in self.rules:
            env: dict = {}
            if not self._unify_head(rule.head, atom, env):
                continue
            children = self._prove_body(list(rule.body), env, running)
            if children is not None:
                d = Derivation(self._fmt(atom), rule=rule.source, children=children)
                self.memo[key] = d
                return d
        self.memo[key] = None
        return None

    def _fmt(self, atom: RuleAtom) -> str:
        parts = []
        for a in atom.args:
            if isinstance(a, Operand):
                parts.append(a.concept if not a.insts else f"{a.concept}#{','.join(a.insts)}")
            else:
                parts.append(str(a))
        return f"{atom.pred}({', '.join(parts)})"

    def _unify_head(self, head: RuleAtom, goal: RuleAtom, env: dict) -> bool:
        for h, g in zip(head.args, goal.args):
            if isinstance(h, Var):
                if h.name in env:
                    if not self._terms_match(env[h.name], g):
                        return False
                    env[h.name] = self._merge(env[h.name], g)
                else:
                    env[h.name] = g
            elif isinstance(h, Const):
                if not self._const_matches(h.value, g):
                    return False
        return True

    def _terms_match(self, a, b) -> bool:
        if isinstance(a, Operand) and isinstance(b, Operand):
            return a.concept == b.concept
        return a == b

    def _merge(self, a, b):
        if isinstance(a, Operand) and isinstance(b, Operand):
            return Operand(a.concept, tuple(dict.fromkeys(a.origins + b.origins)),
                           tuple(dict.fromkeys(a.insts + b.insts)))
        return a

    def _const_matches(self, c, g) -> bool:
        if isinstance(g, Operand):
            resolved = self.t.find(str(c))
            return resolved is not None and any(
                resolved in self.t.ancestors(o) for o in g.origins)
        return isinstance(g, Const) and g.value == c

    def _prove_body(self, literals: list[Literal], env: dict,
                    in_progress: frozenset) -> Optional[list[Derivation]]:
        if not literals:
            return []
        lit, rest = literals[0], literals[1:]
        atom = self._substitute(lit.atom, env)
        if lit.negated:
            if self._has_free_vars(atom):
                return None
            if self._eval_base_negatable(atom):
                return None
            tail = self._prove_body(rest, env, in_progress)
            if tail is None:
                return None
            return [Derivation(f"not {self._fmt(atom)}", note="holds")] + tail

        if atom.pred == "reorder":
            d = self._prove(atom, in_progress)
            if d is None:
                return None
            tail = self._prove_body(rest, env, in_progress)
            if tail is None:
                return None
            return [d] + tail

        for binding, note in self._eval_with_bindings(atom):
            env2 = dict(env)
            env2.update(binding)
            tail = self._prove_body(rest, env2, in_progress)
            if tail is not None:
                return [Derivation(self._fmt(self._substitute(lit.atom, env2)),
                                   note=note)] + tail
        return None

    def _substitute(self, atom: RuleAtom, env: dict) -> RuleAtom:
        args = tuple(env.get(a.name, a) if isinstance(a, Var) else a
                     for a in atom.args)
        return RuleAtom(atom.pred, args)

    def _has_free_vars(self, atom: RuleAtom) -> bool:
        return any(isinstance(a, Var) for a in atom.args)

    # -- base predicate evaluation ------------------------------------------
    def _origins(self, term) -> tuple[str, ...]:
        if isinstance(term, Operand):
            return term.origins
        if isinstance(term, Const):
            c = self.t.find(str(term.value))
            return (c,) if c else ()
        return ()

    def _inst_facts(self, term) -> list[InstanceFacts]:
        if isinstance(term, Operand) and term.insts and self.facts is not None:
            return [self.facts.instances[i] for i in term.insts]
        return []

    def _eval_base(self, atom: RuleAtom) -> bool:
        got = list(self._eval_with_bindings(atom))
        return bool(got)

    def _eval_base_negatable(self, atom: RuleAtom) -> bool:
        """Evaluation used under negation: unknown dynamic facts count as
        true so the negation fails (conservative)."""
        if atom.pred == "readWriteConflicts":
            fx, fy = self._inst_facts(atom.args[0]), self._inst_facts(atom.args[1])
            if not fx or not fy:
                return True  # unknown: assume conflicting
            return any(read_write_conflicts(a, b) for a in fx for b in fy)
        return self._eval_base(atom)

    def _eval_with_bindings(self, atom: RuleAtom):
        p, args = atom.pred, atom.args
        if p == "isA":
            t, c = args
            if isinstance(c, Var):
                # enumerate ancestors of the term's origins (shared ones)
                origin_sets = [self.t.ancestors(o) for o in self._origins(t)]
                if not origin_sets:
                    return
                shared = set.intersection(*map(set, origin_sets))
                base = t if isinstance(t, Operand) else None
                for anc in sorted(shared):
                    op = Operand(anc, base.origins, base.insts) if base else Const(anc)
                    yield {c.name: op}, "isA"
                return
            target = self.t.find(str(c.value)) if isinstance(c, Const) else None
            if target is None:
                return
            origins = self._origins(t)
            if origins and all(target in self.t.ancestors(o) for o in origins):
                yield {}, "isA"
            return
        if p == "hasProperty":
            t, prop = args
            if isinstance(prop, Var):
                return
            origins = self._origins(t)
            if origins and all(self.t.has_property(o, str(prop.value)) for o in origins):
                yield {}, "hasProperty"
            return
        if p == "hasPrerequisite":
            a, b = args
            # hasPrerequisite(A,B): A requires B, i.e. B must precede A.
            oa, ob = self._origins(a), self._origins(b)
            if oa and ob and any(self.t.must_precede(y, x) for x in oa for y in ob):
                yield {}, "hasPrerequisite"
            return
        if p == "readWriteConflicts":
            fx, fy = self._inst_facts(args[0]), self._inst_facts(args[1])
            if fx and fy and any(read_write_conflicts(a, b) for a in fx for b in fy):
                yield {}, "readWriteConflicts"
            return
        if p in ("accessedFields", "readSet", "writeSet", "S_out"):
            t, v = args
            fs = self._inst_facts(t)
            if not fs or not isinstance(v, Var):
                return
            f = fs[0]
            val = {"accessedFields": f.accessed, "readSet": f.reads,
                   "writeSet": f.writes, "S_out": f.out_schema.attributes}[p]
            yield {v.name: Const(frozenset(val))}, p
            return
        if p == "contains":
            a, b = args
            if isinstance(a, Var) or isinstance(b, Var):
                return
            pa = SchemaDescriptor(frozenset(a.value))
            pb = SchemaDescriptor(frozenset(b.value))
            if schema_contains(pa, pb):
                yield {}, "contains"
            return
        raise RuleError(f"unknown predicate {p!r}")


def evaluate_static_rules(taxonomy: "Taxonomy") -> frozenset[tuple[str, str]]:
    """Materialize all concept pairs derivable without query facts."""
    session = RuleSession(taxonomy, facts=None)
    pairs = []
    concepts = sorted(taxonomy.operator_ids())
    for c1 in concepts:
        for c2 in concepts:
            ok, _ = session.resolve_concepts(c1, c2)
            if ok:
                pairs.append((c1, c2))
    return frozenset(pairs)


# --------------------------------------------------------------------------
# structural rules
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StructuralMatch:
    rule: str
    site: str
    rewritten: Dataflow


def _branch_schema(d: Dataflow, taxonomy, schemas, edge) -> SchemaDescriptor:
    return schemas[(edge.src, edge.src_port, "out")]


def _join_key_paths(node: Node, port: int) -> frozenset[AttributePath]:
    keys = node.config.get("on", [])
    if port < len(keys):
        side = keys[port]
        if isinstance(side, str):
            side = [side]
        return frozenset(AttributePath.parse(k) for k in side)
    return frozenset()


def match_join_pushthrough(d: Dataflow, taxonomy: "Taxonomy",
                           facts: QueryFacts) -> list[StructuralMatch]:
    """Push a single-input transformer that only touches one join branch's
    non-key attributes below the join, onto that branch."""
    from .dataflow import Edge

    out: list[StructuralMatch] = []
    schemas = propagate_schemas(d, taxonomy)
    for jn in d.operators():
        if "base:join" not in taxonomy.ancestors(taxonomy.find(jn.op)):
            continue
        j_in = d.in_edges(jn.id)
        if len(j_in) != 2:
            continue
        for je in d.out_edges(jn.id):
            xn = d.nodes.get(je.dst)
            if xn is None or xn.kind != "op":
                continue
            cx = taxonomy.find(xn.op)
            if cx is None or "base:trnsf" not in taxonomy.ancestors(cx):
                continue
            if len(d.in_edges(xn.id)) != 1:
                continue
            fx = facts.instances[xn.id]
            for bi, be in enumerate(j_in):
                mine = _branch_schema(d, taxonomy, schemas, be)
                other = _branch_schema(d, taxonomy, schemas, j_in[1 - bi])
                keys = _join_key_paths(jn, be.dst_port)
                ok = all(mine.covers(r) for r in fx.reads) and all(
                    not any(a.overlaps(k) for k in keys)
                    and not any(a.overlaps(o) for o in other.attributes)
                    for a in fx.accessed)
                if not ok:
                    continue
                new_edges = []
                for e in d.edges:
                    if e is be:
                        new_edges.append(Edge(be.src, be.src_port, xn.id, 0))
                    elif e.src == xn.id:
                        continue
                    elif e is je:
                        continue
                    else:
                        new_edges.append(e)
                new_edges.append(Edge(xn.id, 0, jn.id, be.dst_port))
                for e in d.out_edges(xn.id):
                    new_edges.append(Edge(jn.id, je.src_port, e.dst, e.dst_port))
                nd = Dataflow(d.ordered_nodes(), new_edges)
                from .dataflow import validate
                if not validate(nd, taxonomy):
                    out.append(StructuralMatch(
                        "join-pushthrough", f"{jn.id}/{xn.id}@port{be.dst_port}", nd))
    return out


def match_noop_elimination(d: Dataflow, taxonomy: "Taxonomy",
                           facts: QueryFacts) -> list[StructuralMatch]:
    """Drop a count- and schema-preserving operator whose writes are never
    read downstream and never reach a sink. Our extrapolation of the
    insert/remove rule class; conservative."""
    from .dataflow import Edge, validate as _validate

    out: list[StructuralMatch] = []
    for n in d.operators():
        c = taxonomy.find(n.op)
        if c is None:
            continue
        if not (taxonomy.has_property(c, "|I|=|O|")
                and taxonomy.has_property(c, "S_in = S_out")):
            continue
        ins, outs = d.in_edges(n.id), d.out_edges(n.id)
        if len(ins) != 1:
            continue
        writes = facts.instances[n.id].writes
        if not writes:
            continue
        # collect downstream reads and sink-schema visibility
        schemas = propagate_schemas(d, taxonomy)
        downstream: set[str] = set()
        work = [e.dst for e in outs]
        while work:
            m = work.pop()
            if m in downstream:
                continue
            downstream.add(m)
            work.extend(d.successors(m))
        used = False
        for m in downstream:
            node = d.node(m)
            if node.kind == "sink":
                sink_schema = schemas[(m, 0, "sink")]
                if any(sink_schema.covers(w) for w in writes):
                    used = True
                    break
            if node.kind == "op":
                reads = facts.instances[m].reads
                if any(w.overlaps(r) for w in writes for r in reads):
                    used = True
                    break
        if used:
            continue
        src = ins[0]
        new_edges = [e for e in d.edges if e.dst != n.id and e.src != n.id]
        for e in outs:
            new_edges.append(Edge(src.src, src.src_port, e.dst, e.dst_port))
        nodes = [x for x in d.ordered_nodes() if x.id != n.id]
        nd = Dataflow(nodes, new_edges)
        if not _validate(nd, taxonomy):
            out.append(StructuralMatch("noop-elimination", n.id, nd))
    return out


def match_structural(taxonomy: "Taxonomy", d: Dataflow) -> list[StructuralMatch]:
    """All structural-rule applications on ``d``; every rewritten dataflow
    validates."""
    facts = QueryFacts.from_dataflow(d, taxonomy)
    matches = match_join_pushthrough(d, taxonomy, facts)
    matches += match_noop_elimination(d, taxonomy, facts)
    return matches
