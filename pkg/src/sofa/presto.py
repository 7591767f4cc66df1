"""The operator-property graph: isA taxonomies for operators and properties,
hasProperty / hasPrerequisite / hasPart relations, and package loading.

Packages are UTF-8 ``.presto`` files with a line-oriented fact syntax::

    package(base).
    operator(fltr, elementary).
    isA(fltr, operator).
    property('single-in', arity).
    hasProperty(fltr, 'single-in').
    hasPrerequisite(anntt-rel, anntt-pos).      % rel requires pos
    hasPart(splt-sent, [anntt-sent, split-udf]).
    defaultRead(anntt-sent, text).
    defaultWrite(anntt-sent, sentences, append).
    rule reorder(X,X) :- hasProperty(X,'commutative').

Statements end with a period; ``%`` starts a comment. Operator ids are
namespaced by the declaring package (``base:fltr``); references may use the
bare name when it is unique.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

from .datamodel import AttributePath
from .dataflow import Node, SchemaDescriptor, WriteDecl
from .rewrite import RewriteRule, RuleError, parse_rule, evaluate_static_rules

OPERATOR_ROOT = "operator"
PROPERTY_ROOT = "property"

OPERATOR_KINDS = ("abstract", "elementary", "complex")

_STATIC_TABLES: dict[tuple, frozenset] = {}


class PackageError(ValueError):
    """Raised for malformed or inconsistent package files."""

    def __init__(self, message: str, line: int | None = None):
        where = f" (line {line})" if line else ""
        super().__init__(f"{message}{where}")
        self.line = line


@dataclass
class OperatorConcept:
    id: str
    kind: str
    parents: set[str] = field(default_factory=set)


@dataclass
class PropertyConcept:
    name: str
    parents: set[str] = field(default_factory=set)
    auto: bool = False


_STMT_RE = re.compile(
    r"^(?P<pred>[A-Za-z_][A-Za-z0-9_\-]*)\((?P<args>.*)\)$", re.DOTALL)


def _split_args(text: str) -> list[str]:
    out, depth, quote, cur = [], 0, False, []
    for ch in text:
        if ch == "'" :
            quote = not quote
            cur.append(ch)
        elif quote:
            cur.append(ch)
        elif ch == "[":
            depth += 1
            cur.append(ch)
        elif ch == "]":
            depth -= 1
            cur.append(ch)
        elif ch == "," and depth == 0:
            out.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if cur:
        out.append("".join(cur).strip())
    return [a for a in out if a]


def _unquote(a: str) -> str:
    return a[1:-1] if a.startswith("'") and a.endswith("'") else a


class Taxonomy:
    """Frozen-after-loading registry of operators, properties, relations and
    rewrite rules."""

    def __init__(self, registry=None) -> None:
        self.registry = registry  # interpreter implementations, optional
        self.operators: dict[str, OperatorConcept] = {
            OPERATOR_ROOT: OperatorConcept(OPERATOR_ROOT, "abstract")}
        self.properties: dict[str, PropertyConcept] = {
            PROPERTY_ROOT: PropertyConcept(PROPERTY_ROOT)}
        self.op_props: set[tuple[str, str]] = set()
        self.requires: set[tuple[str, str]] = set()   # (a, b): a requires b
        self.parts: dict[str, tuple[str, ...]] = {}
        self.default_reads: dict[str, frozenset[AttributePath]] = {}
        self.default_writes: dict[str, tuple[WriteDecl, ...]] = {}
        self.cost_hooks: dict[str, str] = {}
        self.rewrite_rules: list[RewriteRule] = []
        self.packages: list[str] = []
        self._frozen = False
        self._anc_cache: dict[str, frozenset[str]] = {}
        self._prop_anc_cache: dict[str, frozenset[str]] = {}
        self._req_cache: dict[str, frozenset[str]] = {}
        self._static_table: Optional[frozenset] = None

    # ------------------------------------------------------------------ load
    def load_package(self, source: str, name_hint: str = "<package>") -> None:
        """Merge one package file into the taxonomy (idempotent)."""
        if self._frozen:
            raise PackageError("taxonomy is frozen; no further packages")
        statements = self._read_statements(source)
        namespace = None
        declared_rules: list[tuple[str, int]] = []
        pending: list[tuple] = []
        for text, line in statements:
            if text.startswith("rule "):
                declared_rules.append((text[len("rule "):].strip(), line))
                continue
            m = _STMT_RE.match(text)
            if not m:
                raise PackageError(f"cannot parse statement: {text!r}", line)
            pred = m.group("pred")
            args = [_unquote(a) for a in _split_args(m.group("args"))]
            if pred == "package":
                namespace = args[0]
                continue
            pending.append((pred, args, line))
        if namespace is None:
            raise PackageError(f"{name_hint}: missing package(...) declaration")

        # two passes: declarations first so in-file forward references work
        for pred, args, line in pending:
            if pred == "operator":
                self._declare_operator(namespace, args, line)
            elif pred == "property":
                self._declare_property(args, line)
        for pred, args, line in pending:
            if pred in ("operator", "property"):
                continue
            self._apply_fact(namespace, pred, args, line)
        for text, line in declared_rules:
            try:
                rule = parse_rule(text)
            except RuleError as exc:
                raise PackageError(str(exc), line) from exc
            if all(r.source != rule.source for r in self.rewrite_rules):
                self.rewrite_rules.append(rule)
        if namespace not in self.packages:
            self.packages.append(namespace)
        self._check_consistency()

    def _read_statements(self, source: str) -> list[tuple[str, int]]:
        out, buf, start = [], [], 0
        for i, raw in enumerate(source.splitlines(), start=1):
            line = self._strip_comment(raw)
            if not line.strip():
                continue
            if not buf:
                start = i
            buf.append(line.strip())
            if line.rstrip().endswith("."):
                stmt = " ".join(buf)
                out.append((stmt[:-1].strip(), start))
                buf = []
        if buf:
            raise PackageError(f"unterminated statement: {' '.join(buf)!r}", start)
        return out

    @staticmethod
    def _strip_comment(line: str) -> str:
        quote = False
        for i, ch in enumerate(line):
            if ch == "'":
                quote = not quote
            elif ch == "%" and not quote:
                return line[:i]
        return line

    def _declare_operator(self, ns: str, args: list[str], line: int) -> None:
        if len(args) != 2 or args[1] not in OPERATOR_KINDS:
            raise PackageError(f"operator(name, {OPERATOR_KINDS}) expected", line)
        cid = f"{ns}:{args[0]}"
        existing = self.operators.get(cid)
        if existing and existing.kind != args[1]:
            raise PackageError(
                f"conflicting redefinition of {cid}: {existing.kind} vs {args[1]}", line)
        if not existing:
            self.operators[cid] = OperatorConcept(cid, args[1])

    def _declare_property(self, args: list[str], line: int) -> None:
        if len(args) < 2:
            raise PackageError("property(name, parent [, auto]) expected", line)
        name, parent = args[0], args[1]
        auto = len(args) > 2 and args[2] == "auto"
        pc = self.properties.setdefault(name, PropertyConcept(name, auto=auto))
        if auto:
            pc.auto = True
        pc.parents.add(parent)

    def _apply_fact(self, ns: str, pred: str, args: list[str], line: int) -> None:
        if pred == "isA":
            child, parent = args
            if child in self.properties:
                self.properties[child].parents.add(parent)
                return
            c = self._resolve(child, ns, line)
            p = self._resolve(parent, ns, line)
            self.operators[c].parents.add(p)
        elif pred == "hasProperty":
            op = self._resolve(args[0], ns, line)
            prop = args[1]
            if prop not in self.properties:
                raise PackageError(f"unknown property {prop!r}", line)
            self.op_props.add((op, prop))
        elif pred == "hasPrerequisite":
            a = self._resolve(args[0], ns, line)
            b = self._resolve(args[1], ns, line)
            self.requires.add((a, b))
        elif pred == "hasPart":
            op = self._resolve(args[0], ns, line)
            if self.operators[op].kind != "complex":
                raise PackageError(f"hasPart only on complex operators: {op}", line)
            inner = args[1].strip()
            if not (inner.startswith("[") and inner.endswith("]")):
                raise PackageError("hasPart expects a [a, b, ...] chain", line)
            comps = tuple(self._resolve(_unquote(x.strip()), ns, line)
                          for x in inner[1:-1].split(",") if x.strip())
            if not comps:
                raise PackageError("hasPart chain must be non-empty", line)
            self.parts[op] = comps
        elif pred == "defaultRead":
            op = self._resolve(args[0], ns, line)
            cur = self.default_reads.get(op, frozenset())
            self.default_reads[op] = cur | {AttributePath.parse(args[1])}
        elif pred == "defaultWrite":
            op = self._resolve(args[0], ns, line)
            mode = args[2] if len(args) > 2 else "set"
            decl = WriteDecl(AttributePath.parse(args[1]), mode)
            cur = self.default_writes.get(op, ())
            if decl not in cur:
                self.default_writes[op] = cur + (decl,)
        elif pred == "costFunction":
            op = self._resolve(args[0], ns, line)
            self.cost_hooks[op] = args[1]
        else:
            raise PackageError(f"unknown fact predicate {pred!r}", line)

    def _resolve(self, name: str, ns: str, line: int | None = None) -> str:
        c = self.find(name, ns)
        if c is None:
            raise PackageError(f"dangling reference to operator {name!r}", line)
        return c

    def _check_consistency(self) -> None:
        self._anc_cache.clear()
        self._prop_anc_cache.clear()
        self._req_cache.clear()
        self._static_table = None
        for c in self.operators.values():
            for p in c.parents:
                if p not in self.operators:
                    raise PackageError(f"dangling isA parent {p!r} of {c.id}")
        for pc in self.properties.values():
            for p in pc.parents:
                if p not in self.properties:
                    raise PackageError(f"dangling property parent {p!r} of {pc.name}")
        for cid in self.operators:
            self.ancestors(cid)  # raises on isA cycles
        for name in self.properties:
            self.property_ancestors(name)
        for cid in sorted(self.operators):
            req = self.requirement_closure(cid)
            if any(r in self.ancestors(cid) or cid in self.ancestors(r) for r in req):
                raise PackageError(f"{cid} is (transitively) its own prerequisite")
        for cid, comps in self.parts.items():
            for comp in comps:
                if comp not in self.operators:
                    raise PackageError(f"dangling hasPart component {comp!r}")

    def freeze(self) -> "Taxonomy":
        """Resolve rule constants, auto-annotate from registered operator
        implementations, and lock the taxonomy."""
        if self._frozen:
            return self
        if self.registry is not None:
            self._auto_annotate()
        self._resolve_rule_constants()
        self._check_consistency()
        self._frozen = True
        return self

    def _auto_annotate(self) -> None:
        for cid, concept in sorted(self.operators.items()):
            if concept.kind == "abstract":
                continue
            impl = self.impl_for(cid)
            if impl is None:
                continue
            for prop in impl.auto_properties():
                if prop not in self.properties:
                    raise PackageError(
                        f"implementation of {cid} declares unknown property {prop!r}")
                self.op_props.add((cid, prop))
            if cid not in self.default_reads and impl.default_reads:
                self.default_reads[cid] = frozenset(
                    AttributePath.parse(p) for p in impl.default_reads)
            if cid not in self.default_writes and impl.default_writes:
                self.default_writes[cid] = tuple(
                    WriteDecl(AttributePath.parse(p), m)
                    for p, m in impl.default_writes)

    def _resolve_rule_constants(self) -> None:
        # rule constants that name operators are checked here; property names
        # and parameter atoms are validated at evaluation time
        for rule in self.rewrite_rules:
            for lit in rule.body:
                if lit.atom.pred == "isA":
                    const = lit.atom.args[1]
                    from .rewrite import Const
                    if isinstance(const, Const) and self.find(str(const.value)) is None:
                        raise PackageError(
                            f"rule references unknown operator {const.value!r}: "
                            f"{rule.source}")

    # --------------------------------------------------------------- queries
    def find(self, name: str, prefer_ns: str | None = None) -> Optional[str]:
        """Resolve an operator concept id; bare names must be unambiguous."""
        if name in self.operators:
            return name
        if prefer_ns and f"{prefer_ns}:{name}" in self.operators:
            return f"{prefer_ns}:{name}"
        hits = [cid for cid in self.operators if cid.split(":", 1)[-1] == name]
        if len(hits) == 1:
            return hits[0]
        return None

    def operator_ids(self) -> list[str]:
        return sorted(self.operators)

    def operator_kind(self, cid: str) -> str:
        return self.operators[cid].kind

    def impl_for(self, cid: str):
        """Registered implementation for a concept, falling back to the
        nearest ancestor with one (breadth-first up the isA edges)."""
        if self.registry is None or cid is None:
            return None
        frontier = [cid]
        visited: set[str] = set()
        while frontier:
            nxt: list[str] = []
            for c in frontier:
                if c in visited:
                    continue
                visited.add(c)
                impl = self.registry.get(c)
                if impl is not None:
                    return impl
                nxt.extend(sorted(self.operators[c].parents))
            frontier = nxt
        return None

    def ancestors(self, cid: str) -> frozenset[str]:
        """Reflexive-transitive isA closure."""
        if cid in self._anc_cache:
            return self._anc_cache[cid]
        if cid not in self.operators:
            raise KeyError(f"unknown operator concept {cid!r}")
        out: set[str] = set()
        stack, path = [cid], set()

        def walk(c: str) -> None:
            if c in path:
                raise PackageError(f"isA cycle through {c!r}")
            if c in out:
                return
            path.add(c)
            for p in self.operators[c].parents:
                walk(p)
            path.discard(c)
            out.add(c)

        walk(cid)
        self._anc_cache[cid] = frozenset(out)
        return self._anc_cache[cid]

    def descendants(self, cid: str) -> frozenset[str]:
        return frozenset(c for c in self.operators if cid in self.ancestors(c))

    def property_ancestors(self, name: str) -> frozenset[str]:
        if name in self._prop_anc_cache:
            return self._prop_anc_cache[name]
        if name not in self.properties:
            raise KeyError(f"unknown property {name!r}")
        out: set[str] = set()
        path: set[str] = set()

        def walk(n: str) -> None:
            if n in path:
                raise PackageError(f"property isA cycle through {n!r}")
            if n in out:
                return
            path.add(n)
            for p in self.properties[n].parents:
                walk(p)
            path.discard(n)
            out.add(n)

        walk(name)
        self._prop_anc_cache[name] = frozenset(out)
        return self._prop_anc_cache[name]

    def has_property(self, op: str, prop: str) -> bool:
        """True iff some isA ancestor of ``op`` carries ``prop`` or a
        specialization of it."""
        cid = self.find(op)
        if cid is None:
            raise KeyError(f"unknown operator concept {op!r}")
        if prop not in self.properties:
            raise KeyError(f"unknown property {prop!r}")
        for a in self.ancestors(cid):
            for (o, q) in self.op_props:
                if o == a and prop in self.property_ancestors(q):
                    return True
        return False

    def properties_of(self, op: str) -> frozenset[str]:
        cid = self.find(op)
        out = set()
        for a in self.ancestors(cid):
            for (o, q) in self.op_props:
                if o == a:
                    out.add(q)
        return frozenset(out)

    # prerequisite machinery -------------------------------------------------
    def provides(self, cid: str) -> frozenset[str]:
        """The concept itself plus everything its hasPart closure contains."""
        out: set[str] = set()
        stack = [cid]
        while stack:
            c = stack.pop()
            if c in out:
                continue
            out.add(c)
            stack.extend(self.parts.get(c, ()))
        return frozenset(out)

    def requirement_closure(self, cid: str) -> frozenset[str]:
        """All concepts that must have run before ``cid`` (transitive,
        inherited along isA, bubbled up from components minus what the
        complex itself provides)."""
        if cid in self._req_cache:
            return self._req_cache[cid]
        self._req_cache[cid] = frozenset()  # cycle guard; validated separately
        direct: set[str] = set()
        for a in self.ancestors(cid):
            for (x, y) in self.requires:
                if x == a:
                    direct.add(y)
        for comp in self.parts.get(cid, ()):
            direct |= self.requirement_closure(comp)
        direct -= self.provides(cid)
        closed = set(direct)
        for r in list(direct):
            closed |= self.requirement_closure(r)
        closed -= self.provides(cid)
        self._req_cache[cid] = frozenset(closed)
        return self._req_cache[cid]

    def must_precede(self, x: str, y: str) -> bool:
        """True iff operator concept ``x`` must be executed before ``y``:
        something ``x`` provides satisfies a requirement of ``y``."""
        cx, cy = self.find(x), self.find(y)
        if cx is None or cy is None:
            raise KeyError(f"unknown concept in must_precede({x!r}, {y!r})")
        req = self.requirement_closure(cy)
        for p in self.provides(cx):
            if any(r in self.ancestors(p) for r in req):
                return True
        return False

    def has_prerequisite(self, x: str, y: str) -> bool:
        """Spec-level API: x must be executed before y."""
        return self.must_precede(x, y)

    # instance-facing helpers --------------------------------------------------
    def effective_access(self, node: Node) -> tuple[frozenset[AttributePath],
                                                    tuple[WriteDecl, ...]]:
        """Instance-declared read/write sets, falling back to taxonomy
        defaults merged along isA ancestors."""
        cid = self.find(node.op)
        reads = node.reads
        writes = node.writes
        if not reads:
            merged: set[AttributePath] = set()
            for a in self.ancestors(cid):
                merged |= self.default_reads.get(a, frozenset())
            reads = frozenset(merged)
        if not writes:
            acc: list[WriteDecl] = []
            for a in sorted(self.ancestors(cid)):
                for w in self.default_writes.get(a, ()):
                    if w not in acc:
                        acc.append(w)
            writes = tuple(acc)
        return reads, writes

    def required_input(self, node: Node) -> frozenset[AttributePath]:
        reads, writes = self.effective_access(node)
        appendable = {w.path for w in writes if w.mode == "append"}
        return frozenset(p for p in reads if p not in appendable)

    def input_arity(self, cid: str) -> Optional[int]:
        impl = self.impl_for(cid)
        if impl is not None:
            return impl.arity
        if self.has_property(cid, "single-in"):
            return 1
        if self.has_property(cid, "dual-in"):
            return 2
        return None

    def output_schema(self, node: Node, in_union: SchemaDescriptor) -> SchemaDescriptor:
        cid = self.find(node.op)
        if cid is None:
            raise KeyError(f"unknown operator {node.op!r}")
        impl = self.impl_for(cid)
        if impl is not None and impl.schema_transform is not None:
            return impl.schema_transform(node, in_union)
        _, writes = self.effective_access(node)
        if self.has_property(cid, "S_in = S_out"):
            return in_union
        return in_union.add(w.path for w in writes)

    def cost_hook(self, cid: str) -> Optional[str]:
        for a in self.ancestors(cid):
            if a in self.cost_hooks:
                return self.cost_hooks[a]
        return None

    # static reorder table ------------------------------------------------------
    def _content_key(self) -> tuple:
        return (
            tuple(sorted((c.id, c.kind, tuple(sorted(c.parents)))
                         for c in self.operators.values())),
            tuple(sorted((p.name, tuple(sorted(p.parents)))
                         for p in self.properties.values())),
            tuple(sorted(self.op_props)),
            tuple(sorted(self.requires)),
            tuple(sorted(self.parts.items())),
            tuple(r.source for r in self.rewrite_rules),
        )

    def static_reorder_table(self) -> frozenset[tuple[str, str]]:
        """Concept pairs derivable without query facts; pure function of the
        taxonomy content, cached process-wide."""
        if self._static_table is None:
            key = self._content_key()
            cached = _STATIC_TABLES.get(key)
            if cached is None:
                cached = evaluate_static_rules(self)
                _STATIC_TABLES[key] = cached
            self._static_table = cached
        return self._static_table

    # ------------------------------------------------------------- expansion
    def expand_complex(self, d) -> "Dataflow":
        """Replace every complex operator instance by its hasPart chain."""
        from .dataflow import Dataflow, Edge

        current = d
        for _ in range(16):  # components may themselves be complex
            complex_nodes = [
                n for n in current.operators()
                if self.operator_kind(self.find(n.op)) == "complex"]
            if not complex_nodes:
                return current
            nodes = []
            edges = list(current.edges)
            for n in current.ordered_nodes():
                if n not in complex_nodes:
                    nodes.append(n)
                    continue
                cid = self.find(n.op)
                chain = self.parts.get(cid)
                if not chain:
                    raise PackageError(f"complex operator {cid} has no hasPart mapping")
                comp_cfg = n.config.get("components", {})
                comp_ids = []
                for idx, comp in enumerate(chain):
                    local = comp.split(":", 1)[-1]
                    sub_id = f"{n.id}.{idx}-{local}"
                    comp_ids.append(sub_id)
                    cfg = comp_cfg.get(local, {})
                    nodes.append(Node(
                        id=sub_id, kind="op", op=comp,
                        config=cfg.get("config", cfg if cfg else {}),
                        reads=frozenset(AttributePath.parse(p)
                                        for p in cfg.get("reads", ())) or frozenset(),
                        writes=tuple(WriteDecl(AttributePath.parse(w["path"]),
                                               w.get("mode", "set"))
                                     for w in cfg.get("writes", ()))))
                new_edges = []
                for e in edges:
                    if e.dst == n.id:
                        new_edges.append(Edge(e.src, e.src_port, comp_ids[0], e.dst_port))
                    elif e.src == n.id:
                        new_edges.append(Edge(comp_ids[-1], e.src_port, e.dst, e.dst_port))
                    else:
                        new_edges.append(e)
                for a, b in zip(comp_ids, comp_ids[1:]):
                    new_edges.append(Edge(a, 0, b, 0))
                edges = new_edges
            current = Dataflow(nodes, edges)
        raise PackageError("hasPart expansion did not terminate")


# ------------------------------------------------------------------ built-ins
def builtin_package_names() -> list[str]:
    files = resources.files("sofa.packages")
    return sorted(p.name[:-len(".presto")] for p in files.iterdir()
                  if p.name.endswith(".presto"))


def load_builtin(taxonomy: Taxonomy, name: str) -> None:
    text = resources.files("sofa.packages").joinpath(f"{name}.presto").read_text("utf-8")
    taxonomy.load_package(text, name_hint=name)


def standard_taxonomy(registry=None, packages: Iterable[str] = ("base", "ie", "dc", "web"),
                      extra_sources: Iterable[str] = ()) -> Taxonomy:
    """Load the shipped packages (plus any extra sources) and freeze."""
    if registry is None:
        from .interpreter import REGISTRY
        registry = REGISTRY
    t = Taxonomy(registry=registry)
    for p in packages:
        load_builtin(t, p)
    for src in extra_sources:
        t.load_package(src, name_hint="<extra>")
    return t.freeze()
