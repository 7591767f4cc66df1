"""Deterministic in-memory execution of dataflows.

This is the semantic-equivalence oracle and the substrate for statistics
sampling. Operator implementations are deliberately simple, rule- and
dictionary-based, so that their taxonomy annotations are provably correct;
strict mode enforces the declared metadata at run time.
"""

from __future__ import annotations

import random
import re
import time
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable, Optional

from .datamodel import (
    AttributePath,
    Dataset,
    Record,
    SchemaDescriptor,
    bag_equal,
    canonical_key,
    read_path,
    write_path,
)
from .dataflow import Dataflow, Node, topological_order


class ExecutionError(RuntimeError):
    pass


class MetadataViolation(ExecutionError):
    """Strict mode: an implementation contradicted its declared metadata."""


# --------------------------------------------------------------------------
# implementation registry
# --------------------------------------------------------------------------

@dataclass
class OperatorImpl:
    concept: str
    arity: int
    parallel: str          # map | reduce | cogroup-fn
    processing: str        # RAAT | bag
    schema_mode: str       # preserve | add | arbitrary
    discipline: str        # none | add-only | arbitrary
    io_ratio: str          # eq | dec | inc | any
    record_fn: Optional[Callable] = None   # (record, node) -> list[record dict]
    bag_fn: Optional[Callable] = None      # (list[Dataset], node) -> list[record dict]
    default_reads: tuple[str, ...] = ()
    default_writes: tuple[tuple[str, str], ...] = ()
    schema_transform: Optional[Callable] = None  # (node, SchemaDescriptor) -> SchemaDescriptor
    port_symmetric: bool = False

    def auto_properties(self) -> list[str]:
        props = [self.parallel, self.processing]
        props.append({1: "single-in", 2: "dual-in"}.get(self.arity, "multi-in"))
        props.append({
            "preserve": "S_in = S_out",
            "add": "S_out contains S_in",
            "arbitrary": "schema-arbitrary",
        }[self.schema_mode])
        props.append({
            "none": "no field updates",
            "add-only": "add-only",
            "arbitrary": "arbitrary updates",
        }[self.discipline])
        return props


REGISTRY: dict[str, OperatorImpl] = {}


def register(impl: OperatorImpl) -> OperatorImpl:
    REGISTRY[impl.concept] = impl
    return impl


def canon_sorted(items: list) -> list:
    """Deterministic content-based ordering for annotation arrays; the same
    comparator everywhere keeps independently produced arrays identical."""
    return sorted(items, key=canonical_key)


# --------------------------------------------------------------------------
# small evaluators shared by operators
# --------------------------------------------------------------------------

def _first(rec: Record, path: str):
    vals = read_path(rec, AttributePath.parse(path))
    return vals[0] if vals else None


def eval_predicate(rec: Record, pred: dict) -> bool:
    path = pred["path"]
    op = pred.get("op", "exists")
    value = pred.get("value")
    if op == "count_where_gt":
        items = _first(rec, path) or []
        where = pred.get("where", {})
        n = sum(1 for it in items
                if isinstance(it, dict) and it.get(where.get("field")) == where.get("equals"))
        return n > value
    if op == "count_gt":
        items = _first(rec, path) or []
        return len(items) > value
    v = _first(rec, path)
    if op == "exists":
        return v is not None
    if v is None:
        return False
    if op == "gt":
        return v > value
    if op == "ge":
        return v >= value
    if op == "lt":
        return v < value
    if op == "le":
        return v <= value
    if op == "eq":
        return v == value
    if op == "ne":
        return v != value
    if op == "prefix":
        return isinstance(v, str) and v.startswith(value)
    if op == "not_prefix":
        return isinstance(v, str) and not v.startswith(value)
    raise ExecutionError(f"unknown predicate op {op!r}")


def eval_expr(rec: Record, expr: dict):
    if "const" in expr:
        return expr["const"]
    if "copy" in expr:
        return _first(rec, expr["copy"])
    if "lower" in expr:
        v = _first(rec, expr["lower"])
        return v.lower() if isinstance(v, str) else v
    if "upper" in expr:
        v = _first(rec, expr["upper"])
        return v.upper() if isinstance(v, str) else v
    if "len" in expr:
        v = _first(rec, expr["len"])
        return len(v) if isinstance(v, (str, list)) else 0
    if "concat" in expr:
        return "".join(str(eval_expr(rec, e)) for e in expr["concat"])
    raise ExecutionError(f"unknown expression {expr!r}")


_SENT_ABBREV = ("Mr.", "Mrs.", "Dr.", "Inc.", "Ltd.", "Co.", "St.", "No.")
_WORD_RE = re.compile(r"[A-Za-z0-9%]+")
_TAG_RE = re.compile(r"<[^<>]*>")

VERB_LEXICON = frozenset({
    "works", "worked", "joined", "joins", "leads", "led", "heads", "headed",
    "founded", "left", "visited", "met", "announced", "acquired", "advises",
})

STOPWORDS = frozenset({
    "the", "a", "an", "at", "in", "on", "of", "and", "or", "to", "was",
    "is", "were", "with", "for", "by", "new", "downtown",
})


@lru_cache(maxsize=200_000)
def split_sentences(text: str) -> tuple[str, ...]:
    guarded = text
    for ab in _SENT_ABBREV:
        guarded = guarded.replace(ab, ab[:-1] + "\x00")
    parts = re.split(r"(?<=[.!?])\s+", guarded)
    out = []
    for p in parts:
        p = p.replace("\x00", ".").strip()
        if p:
            out.append(p)
    return tuple(out)


@lru_cache(maxsize=200_000)
def _words(text: str) -> tuple[str, ...]:
    return tuple(_WORD_RE.findall(text))


@lru_cache(maxsize=200_000)
def stem_word(w: str) -> str:
    w = w.lower()
    for suffix in ("ing", "ed", "es", "s"):
        if w.endswith(suffix) and len(w) - len(suffix) >= 3:
            return w[: len(w) - len(suffix)]
    return w


def _sentences_of(rec: Record) -> list[dict]:
    return _first(rec, "sentences") or []


def append_sorted(rec: Record, path: str, items: list) -> Record:
    """Add-only write keeping the target array canonically sorted, so that
    independent annotators produce identical arrays in any order."""
    existing = _first(rec, path)
    if existing is not None and not isinstance(existing, list):
        from .datamodel import WriteConflictError
        raise WriteConflictError(f"append to non-array value at {path}")
    merged = canon_sorted(list(existing or []) + list(items))
    return write_path(rec, AttributePath.parse(path), merged, "set")


# --------------------------------------------------------------------------
# base package operators
# --------------------------------------------------------------------------

def _fltr(rec: Record, node: Node):
    return [rec.root] if eval_predicate(rec, node.config["pred"]) else []


register(OperatorImpl(
    "base:fltr", 1, "map", "RAAT", "preserve", "none", "dec",
    record_fn=_fltr))


def _prjt(rec: Record, node: Node):
    keep = node.config["keep"]
    return [{k: v for k, v in rec.root.items() if k in keep}]


def _prjt_schema(node: Node, in_union: SchemaDescriptor) -> SchemaDescriptor:
    keep = set(node.config.get("keep", ()))
    kept = frozenset(a for a in in_union.attributes if a.steps[0] in keep)
    return SchemaDescriptor(kept | frozenset(
        AttributePath((k,)) for k in sorted(keep)))


register(OperatorImpl(
    "base:prjt", 1, "map", "RAAT", "arbitrary", "none", "eq",
    record_fn=_prjt, schema_transform=_prjt_schema))


def _trnsf(rec: Record, node: Node):
    out = rec
    for step in node.config.get("set", ()):
        out = write_path(out, AttributePath.parse(step["path"]),
                         eval_expr(out, step["expr"]), "set")
    return [out.root]


register(OperatorImpl(
    "base:trnsf", 1, "map", "RAAT", "add", "arbitrary", "eq",
    record_fn=_trnsf))
register(OperatorImpl(
    "base:trfrc", 1, "map", "RAAT", "add", "arbitrary", "eq",
    record_fn=_trnsf))


def _nst(rec: Record, node: Node):
    paths, target = node.config["paths"], node.config["as"]
    inner = {k: rec.root[k] for k in paths if k in rec.root}
    rest = {k: v for k, v in rec.root.items() if k not in paths}
    rest[target] = inner
    return [rest]


def _nst_schema(node: Node, in_union: SchemaDescriptor) -> SchemaDescriptor:
    dropped = in_union.remove(AttributePath((p,)) for p in node.config["paths"])
    return dropped.add([AttributePath((node.config["as"],))])


register(OperatorImpl(
    "base:nst", 1, "map", "RAAT", "arbitrary", "arbitrary", "eq",
    record_fn=_nst, schema_transform=_nst_schema))


def _unnst(rec: Record, node: Node):
    path, target = node.config["path"], node.config.get("as", node.config["path"])
    items = _first(rec, path) or []
    rest = {k: v for k, v in rec.root.items() if k != path}
    return [{**rest, target: it} for it in items]


def _unnst_schema(node: Node, in_union: SchemaDescriptor) -> SchemaDescriptor:
    dropped = in_union.remove([AttributePath((node.config["path"],))])
    return dropped.add([AttributePath((node.config.get("as", node.config["path"]),))])


register(OperatorImpl(
    "base:unnst", 1, "map", "RAAT", "arbitrary", "arbitrary", "inc",
    record_fn=_unnst, schema_transform=_unnst_schema))
register(OperatorImpl(
    "base:sptrc", 1, "map", "RAAT", "arbitrary", "arbitrary", "inc",
    record_fn=_unnst, schema_transform=_unnst_schema))


def _key_of(rec: Record, paths) -> tuple:
    return tuple(canonical_key(_first(rec, p)) for p in paths)


def _equi_join(inputs: list[Dataset], node: Node):
    on = node.config["on"]
    left_keys = on[0] if isinstance(on[0], list) else [on[0]]
    right_keys = on[1] if isinstance(on[1], list) else [on[1]]
    left, right = inputs
    table: dict[tuple, list[Record]] = {}
    for r in right.canonical():
        table.setdefault(_key_of(r, right_keys), []).append(r)
    out = []
    for l in left.canonical():
        for r in table.get(_key_of(l, left_keys), ()):
            out.append({**l.root, **r.root})
    return out


def _join_symmetric(node: Node) -> bool:
    on = node.config.get("on", [])
    return len(on) == 2 and on[0] == on[1]


register(OperatorImpl(
    "base:equi-join", 2, "cogroup-fn", "bag", "arbitrary", "arbitrary", "any",
    bag_fn=_equi_join))


def _grp(inputs: list[Dataset], node: Node):
    by = node.config["by"]
    aggs = node.config.get("aggs", {})
    groups: dict[tuple, list[Record]] = {}
    for r in inputs[0].canonical():
        groups.setdefault(_key_of(r, by), []).append(r)
    out = []
    for key in sorted(groups):
        recs = groups[key]
        row = {p: _first(recs[0], p) for p in by}
        for name, spec in sorted(aggs.items()):
            fn = spec["fn"]
            if fn == "count":
                row[name] = len(recs)
            elif fn == "sum":
                row[name] = sum(_first(r, spec["path"]) or 0 for r in recs)
            elif fn == "min":
                row[name] = min(_first(r, spec["path"]) for r in recs)
            elif fn == "max":
                row[name] = max(_first(r, spec["path"]) for r in recs)
            else:
                raise ExecutionError(f"unknown aggregate {fn!r}")
        out.append(row)
    return out


def _grp_schema(node: Node, in_union: SchemaDescriptor) -> SchemaDescriptor:
    names = list(node.config["by"]) + sorted(node.config.get("aggs", {}))
    return SchemaDescriptor(frozenset(AttributePath.parse(p) for p in names))


register(OperatorImpl(
    "base:grp", 1, "reduce", "bag", "arbitrary", "arbitrary", "dec",
    bag_fn=_grp, schema_transform=_grp_schema))


def _cogrp(inputs: list[Dataset], node: Node):
    by = node.config["by"]
    names = node.config.get("collect", ["l", "r"])
    groups: dict[tuple, tuple[list, list]] = {}
    for side, ds in enumerate(inputs):
        for r in ds.canonical():
            slot = groups.setdefault(_key_of(r, by), ([], []))
            slot[side].append({k: v for k, v in r.root.items() if k not in by})
    out = []
    for key in sorted(groups):
        l, r = groups[key]
        probe = None
        for ds in inputs:
            for rec in ds:
                if _key_of(rec, by) == key:
                    probe = rec
                    break
            if probe:
                break
        row = {p: _first(probe, p) for p in by}
        row[names[0]] = canon_sorted(l)
        row[names[1]] = canon_sorted(r)
        out.append(row)
    return out


def _cogrp_schema(node: Node, in_union: SchemaDescriptor) -> SchemaDescriptor:
    names = list(node.config["by"]) + list(node.config.get("collect", ["l", "r"]))
    return SchemaDescriptor(frozenset(AttributePath.parse(p) for p in names))


register(OperatorImpl(
    "base:cogrp", 2, "cogroup-fn", "bag", "arbitrary", "arbitrary", "any",
    bag_fn=_cogrp, schema_transform=_cogrp_schema, port_symmetric=True))


def _union_all(inputs: list[Dataset], node: Node):
    out = []
    for ds in inputs:
        out.extend(r.root for r in ds.canonical())
    return out


register(OperatorImpl(
    "base:union-all", 2, "map", "bag", "add", "none", "eq",
    bag_fn=_union_all, port_symmetric=True))


def _union_dist(inputs: list[Dataset], node: Node):
    seen, out = set(), []
    for ds in inputs:
        for r in ds.canonical():
            if r.key not in seen:
                seen.add(r.key)
                out.append(r.root)
    return out


register(OperatorImpl(
    "base:union-dist", 2, "reduce", "bag", "add", "none", "dec",
    bag_fn=_union_dist, port_symmetric=True))


def _smpl(rec: Record, node: Node):
    fraction = node.config.get("fraction", 1.0)
    seed = node.config.get("seed", 0)
    h = hash((seed, rec.key)) % 10_000
    return [rec.root] if h < fraction * 10_000 else []


register(OperatorImpl(
    "base:smpl", 1, "map", "RAAT", "preserve", "none", "dec",
    record_fn=_smpl))


# --------------------------------------------------------------------------
# IE package operators
# --------------------------------------------------------------------------

def _anntt_sent(rec: Record, node: Node):
    text = _first(rec, "text") or ""
    sents = [{"i": i, "s": s} for i, s in enumerate(split_sentences(text))]
    return [append_sorted(rec, "sentences", sents).root]


register(OperatorImpl(
    "ie:anntt-sent", 1, "map", "RAAT", "add", "add-only", "eq",
    record_fn=_anntt_sent,
    default_reads=("text",), default_writes=(("sentences", "append"),)))

# annotation arrays carrying a per-sentence tag; the record splitter
# redistributes exactly these
SENTENCE_TAGGED = ("entities", "pos", "relations", "tokens", "stems", "stops", "terms")


def _split_udf(rec: Record, node: Node):
    sents = _sentences_of(rec)
    out = []
    for e in sents:
        row = dict(rec.root)
        row["text"] = e["s"]
        row["sentences"] = [e]
        for attr in SENTENCE_TAGGED:
            if attr in row and isinstance(row[attr], list):
                row[attr] = [it for it in row[attr]
                             if isinstance(it, dict) and it.get("sent") == e["i"]]
        out.append(row)
    return out


register(OperatorImpl(
    "ie:split-udf", 1, "map", "RAAT", "preserve", "arbitrary", "inc",
    record_fn=_split_udf,
    default_reads=("sentences",),
    default_writes=tuple([("text", "set"), ("sentences", "set")]
                         + [(a, "set") for a in SENTENCE_TAGGED])))


def _anntt_tok(rec: Record, node: Node):
    toks = []
    for e in _sentences_of(rec):
        for j, w in enumerate(_words(e["s"])):
            toks.append({"sent": e["i"], "j": j, "w": w})
    return [write_path(rec, AttributePath.parse("tokens"), canon_sorted(toks),
                       "set").root]


register(OperatorImpl(
    "ie:anntt-tok", 1, "map", "RAAT", "add", "arbitrary", "eq",
    record_fn=_anntt_tok,
    default_reads=("sentences",), default_writes=(("tokens", "set"),)))


def _pos_tag(w: str, j: int) -> str:
    if w.lower() in VERB_LEXICON:
        return "VB"
    if w.isdigit():
        return "CD"
    if w[:1].isupper() and j > 0:
        return "NNP"
    return "NN"


@lru_cache(maxsize=200_000)
def _pos_tags_of(s: str) -> tuple:
    return tuple({"w": w, "tag": _pos_tag(w, j)}
                 for j, w in enumerate(_words(s)))


def _anntt_pos(rec: Record, node: Node):
    tags = []
    for e in _sentences_of(rec):
        for t in _pos_tags_of(e["s"]):
            tags.append({"sent": e["i"], **t})
    return [append_sorted(rec, "pos", tags).root]


register(OperatorImpl(
    "ie:anntt-pos", 1, "map", "RAAT", "add", "add-only", "eq",
    record_fn=_anntt_pos,
    default_reads=("sentences",), default_writes=(("pos", "append"),)))

PERSON_DICT = (
    "Alice Marsh", "Bob Keller", "Carol Diaz", "David Lowe", "Erin Walsh",
    "Frank Ochoa", "Grace Ito", "Henry Platt", "Irene Kovacs", "Jonas Byrne",
)
COMPANY_DICT = (
    "Acme Corp", "Bluepeak", "Globex", "Initech", "Nimbus Data",
    "Orchid Works", "Quantum Foundry", "Vortex Systems",
)


@lru_cache(maxsize=200_000)
def _names_in(s: str, names: tuple) -> tuple[str, ...]:
    return tuple(name for name in names if name in s)


def _annotate_entities(rec: Record, node: Node, etype: str, names) -> list[dict]:
    source = node.config.get("source", "sentences")
    if source == "text":
        units = [(0, _first(rec, "text") or "")]
    else:
        units = [(e["i"], e["s"]) for e in _sentences_of(rec)]
    ents = []
    for i, s in units:
        for name in _names_in(s, names):
            ents.append({"t": etype, "name": name, "sent": i})
    return [append_sorted(rec, "entities", ents).root]


def _anntt_ent_pers(rec: Record, node: Node):
    return _annotate_entities(rec, node, "pers", PERSON_DICT)


def _anntt_ent_comp(rec: Record, node: Node):
    return _annotate_entities(rec, node, "comp", COMPANY_DICT)


register(OperatorImpl(
    "ie:anntt-ent-pers", 1, "map", "RAAT", "add", "add-only", "eq",
    record_fn=_anntt_ent_pers,
    default_reads=("sentences",), default_writes=(("entities", "append"),)))
register(OperatorImpl(
    "ie:anntt-ent-comp", 1, "map", "RAAT", "add", "add-only", "eq",
    record_fn=_anntt_ent_comp,
    default_reads=("sentences",), default_writes=(("entities", "append"),)))


def _anntt_rel(rec: Record, node: Node):
    ents = _first(rec, "entities") or []
    pos = _first(rec, "pos") or []
    verb_sents = {p["sent"] for p in pos if p.get("tag") == "VB"}
    rels = []
    by_sent: dict[int, tuple[list, list]] = {}
    for e in ents:
        slot = by_sent.setdefault(e["sent"], ([], []))
        (slot[0] if e["t"] == "pers" else slot[1]).append(e["name"])
    for sent in sorted(by_sent):
        if sent not in verb_sents:
            continue
        pers, comp = by_sent[sent]
        for p in sorted(set(pers)):
            for c in sorted(set(comp)):
                rels.append({"p": p, "c": c, "sent": sent})
    return [append_sorted(rec, "relations", rels).root]


register(OperatorImpl(
    "ie:anntt-rel-pc", 1, "map", "RAAT", "add", "add-only", "eq",
    record_fn=_anntt_rel,
    default_reads=("sentences", "entities", "pos"),
    default_writes=(("relations", "append"),)))


def _stem_udf(rec: Record, node: Node):
    toks = _first(rec, "tokens") or []
    stems = [{"sent": t["sent"], "t": stem_word(t["w"])} for t in toks]
    return [append_sorted(rec, "stems", stems).root]


register(OperatorImpl(
    "ie:stem-udf", 1, "map", "RAAT", "add", "add-only", "eq",
    record_fn=_stem_udf,
    default_reads=("tokens",), default_writes=(("stems", "append"),)))


def _anntt_stop(rec: Record, node: Node):
    stems = _first(rec, "stems") or []
    stops = [{"sent": s["sent"], "t": s["t"]} for s in stems if s["t"] in STOPWORDS]
    return [append_sorted(rec, "stops", stops).root]


register(OperatorImpl(
    "ie:anntt-stop", 1, "map", "RAAT", "add", "add-only", "eq",
    record_fn=_anntt_stop,
    default_reads=("stems",), default_writes=(("stops", "append"),)))


def _rmstop_udf(rec: Record, node: Node):
    stems = _first(rec, "stems") or []
    stop_keys = {canonical_key(s) for s in _first(rec, "stops") or []}
    terms = [{"sent": s["sent"], "t": s["t"]} for s in stems
             if canonical_key({"sent": s["sent"], "t": s["t"]}) not in stop_keys]
    return [append_sorted(rec, "terms", terms).root]


register(OperatorImpl(
    "ie:rmstop-udf", 1, "map", "RAAT", "add", "add-only", "eq",
    record_fn=_rmstop_udf,
    default_reads=("stems", "stops"), default_writes=(("terms", "append"),)))


def _splt_tok(rec: Record, node: Node):
    keep = node.config.get("keep", ["id", "year"])
    target = node.config.get("as", "term")
    base = {k: rec.root.get(k) for k in keep}
    return [{**base, target: t["t"]} for t in _first(rec, "terms") or []]


def _splt_tok_schema(node: Node, in_union: SchemaDescriptor) -> SchemaDescriptor:
    names = list(node.config.get("keep", ["id", "year"]))
    names.append(node.config.get("as", "term"))
    return SchemaDescriptor(frozenset(AttributePath.parse(p) for p in names))


register(OperatorImpl(
    "ie:splt-tok", 1, "map", "RAAT", "arbitrary", "arbitrary", "any",
    record_fn=_splt_tok, schema_transform=_splt_tok_schema,
    default_reads=("terms",), default_writes=(("term", "set"),)))


def _mrg(inputs: list[Dataset], node: Node):
    on = node.config.get("on", "id")
    merge_attrs = node.config.get("merge", ["entities"])
    left, right = inputs
    table: dict[tuple, list[Record]] = {}
    for r in right.canonical():
        table.setdefault(_key_of(r, [on]), []).append(r)
    out = []
    for l in left.canonical():
        for r in table.get(_key_of(l, [on]), ()):
            row = dict(l.root)
            for attr in merge_attrs:
                lv = l.root.get(attr) or []
                rv = r.root.get(attr) or []
                seen, union = set(), []
                for it in canon_sorted(list(lv) + list(rv)):
                    k = canonical_key(it)
                    if k not in seen:
                        seen.add(k)
                        union.append(it)
                if union or attr in l.root or attr in r.root:
                    row[attr] = union
            for k, v in r.root.items():
                if k not in row:
                    row[k] = v
            out.append(row)
    return out


register(OperatorImpl(
    "ie:mrg", 2, "cogroup-fn", "bag", "add", "add-only", "dec",
    bag_fn=_mrg, port_symmetric=True,
    default_reads=("id", "entities"), default_writes=(("entities", "append"),)))


def _pers_udf(rec: Record, node: Node):
    ents = _first(rec, "entities") or []
    persons = sorted({e["name"] for e in ents if e.get("t") == "pers"})
    return [write_path(rec, AttributePath.parse("persons"), persons, "set").root]


register(OperatorImpl(
    "ie:pers-udf", 1, "map", "RAAT", "add", "add-only", "eq",
    record_fn=_pers_udf,
    default_reads=("entities",), default_writes=(("persons", "set"),)))


# --------------------------------------------------------------------------
# DC package operators
# --------------------------------------------------------------------------

def _scrb(inputs: list[Dataset], node: Node):
    rules = node.config.get("rules", ())
    out = []
    for rec in inputs[0].canonical():
        row, ok = dict(rec.root), True
        for rule in rules:
            path = rule["path"]
            v = row.get(path)
            valid = ((rule.get("require") == "int" and isinstance(v, int)
                      and not isinstance(v, bool))
                     or (rule.get("require") == "str" and isinstance(v, str))
                     or (rule.get("require") == "nonnull" and v is not None))
            if valid:
                continue
            if rule.get("action") == "default":
                row[path] = rule.get("default")
            else:
                ok = False
                break
        if ok:
            out.append(row)
    return out


register(OperatorImpl(
    "dc:scrb", 1, "map", "bag", "preserve", "arbitrary", "dec",
    bag_fn=_scrb))


def _norm_text(s: str, prefix: int) -> str:
    return re.sub(r"[^a-z0-9]", "", s.lower())[:prefix]


def _ddup(inputs: list[Dataset], node: Node):
    key_cfg = node.config.get("key", {"path": "text", "prefix": 24})
    path, prefix = key_cfg.get("path", "text"), key_cfg.get("prefix", 24)
    groups: dict[str, list[Record]] = {}
    for rec in inputs[0].canonical():
        v = _first(rec, path)
        groups.setdefault(_norm_text(str(v), prefix), []).append(rec)
    out = []
    for i, gk in enumerate(sorted(groups)):
        recs = groups[gk]
        for rec in recs:
            row = dict(rec.root)
            if len(recs) > 1:
                row["cluster"] = f"c{i}"
            out.append(row)
    return out


register(OperatorImpl(
    "dc:ddup", 1, "reduce", "bag", "add", "add-only", "eq",
    bag_fn=_ddup,
    default_reads=("text",), default_writes=(("cluster", "set"),)))


def _fuse(inputs: list[Dataset], node: Node):
    cluster_attr = node.config.get("cluster", "cluster")
    singles, groups = [], {}
    for rec in inputs[0].canonical():
        c = rec.root.get(cluster_attr)
        if c is None:
            singles.append({k: v for k, v in rec.root.items() if k != cluster_attr})
        else:
            groups.setdefault(c, []).append(rec)
    out = list(singles)
    for c in sorted(groups):
        recs = groups[c]
        base = dict(recs[0].root)
        for other in recs[1:]:
            for k, v in other.root.items():
                if base.get(k) is None and v is not None:
                    base[k] = v
        base.pop(cluster_attr, None)
        out.append(base)
    return out


def _fuse_schema(node: Node, in_union: SchemaDescriptor) -> SchemaDescriptor:
    return in_union.remove([AttributePath((node.config.get("cluster", "cluster"),))])


register(OperatorImpl(
    "dc:fuse", 1, "reduce", "bag", "arbitrary", "arbitrary", "dec",
    bag_fn=_fuse, schema_transform=_fuse_schema))


def _lnkrc(inputs: list[Dataset], node: Node):
    on = node.config.get("on", ["id", "id"])
    lk = on[0] if isinstance(on, list) else on
    rk = on[1] if isinstance(on, list) and len(on) > 1 else lk
    left, right = inputs
    table: dict[tuple, list] = {}
    for r in right.canonical():
        table.setdefault(_key_of(r, [rk]), []).append(r.root.get("id"))
    out = []
    for l in left.canonical():
        links = sorted(x for x in table.get(_key_of(l, [lk]), ()) if x is not None)
        row = dict(l.root)
        if links:
            row["links"] = [{"ref": x} for x in links]
        out.append(row)
    return out


register(OperatorImpl(
    "dc:lnkrc", 2, "cogroup-fn", "bag", "add", "add-only", "dec",
    bag_fn=_lnkrc,
    default_writes=(("links", "append"),)))


def _norm_val(rec: Record, node: Node):
    path = node.config["path"]
    v = _first(rec, path)
    if isinstance(v, str):
        return [write_path(rec, AttributePath.parse(path), v.lower(), "set").root]
    return [rec.root]


register(OperatorImpl(
    "dc:norm-val", 1, "map", "RAAT", "preserve", "arbitrary", "eq",
    record_fn=_norm_val))


# --------------------------------------------------------------------------
# web package operators
# --------------------------------------------------------------------------

def _mask_markup(s: str) -> str:
    return _TAG_RE.sub(lambda m: "%" * len(m.group(0)), s)


def _rmark(rec: Record, node: Node):
    text = _first(rec, "text") or ""
    out = write_path(rec, AttributePath.parse("text"), _mask_markup(text), "set")
    sents = _sentences_of(out)
    if sents:
        masked = [{**e, "s": _mask_markup(e["s"])} for e in sents]
        out = write_path(out, AttributePath.parse("sentences"), masked, "set")
    return [out.root]


register(OperatorImpl(
    "web:rmark", 1, "map", "RAAT", "preserve", "arbitrary", "eq",
    record_fn=_rmark,
    default_reads=("text",), default_writes=(("text", "set"),)))


# --------------------------------------------------------------------------
# execution
# --------------------------------------------------------------------------

@dataclass
class OpTrace:
    consumed: int = 0      # records processed, component work included
    produced: int = 0
    entered: int = 0       # records crossing the node boundary inward
    emitted: int = 0       # records crossing the node boundary outward
    invocations: int = 0
    elapsed: float = 0.0
    annotations: int = 0


@dataclass
class ExecutionTrace:
    ops: dict[str, OpTrace] = field(default_factory=dict)

    def of(self, nid: str) -> OpTrace:
        return self.ops.setdefault(nid, OpTrace())

    @property
    def units(self) -> int:
        """Total records consumed across operators; the deterministic
        runtime proxy used in comparisons."""
        return sum(t.consumed for t in self.ops.values())


def _annotation_delta(impl: OperatorImpl, before: Record, outs: list[dict]) -> int:
    added = 0
    for path, mode in impl.default_writes:
        if mode != "append":
            continue
        prior = _first(before, path)
        n0 = len(prior) if isinstance(prior, list) else 0
        for o in outs:
            v = o.get(path)
            if isinstance(v, list):
                added += max(0, len(v) - n0)
    return added


def _check_record_metadata(impl: OperatorImpl, node: Node, rec: Record,
                           outs: list[dict]) -> None:
    if impl.io_ratio == "eq" and len(outs) != 1:
        raise MetadataViolation(
            f"{node.id} ({impl.concept}) declares |I|=|O| but emitted {len(outs)}")
    if impl.io_ratio == "dec" and len(outs) > 1:
        raise MetadataViolation(
            f"{node.id} ({impl.concept}) declares |I|>=|O| but emitted {len(outs)}")
    if impl.schema_mode == "preserve":
        for o in outs:
            if set(o) != set(rec.root):
                raise MetadataViolation(
                    f"{node.id} ({impl.concept}) declares schema preservation "
                    f"but changed attributes {sorted(set(o) ^ set(rec.root))}")
    if impl.discipline in ("none", "add-only"):
        for o in outs:
            for k, v in rec.root.items():
                if k not in o:
                    # dropping whole fields is not an update; add-only
                    # additionally forbids it
                    if impl.discipline == "add-only":
                        raise MetadataViolation(
                            f"{node.id} ({impl.concept}) dropped field {k!r}")
                    continue
                if canonical_key(o[k]) == canonical_key(v):
                    continue
                if impl.discipline == "add-only" and isinstance(v, list) \
                        and isinstance(o[k], list):
                    from collections import Counter
                    old = Counter(canonical_key(x) for x in v)
                    new = Counter(canonical_key(x) for x in o[k])
                    if all(new[key] >= n for key, n in old.items()):
                        continue
                raise MetadataViolation(
                    f"{node.id} ({impl.concept}) updated field {k!r} "
                    f"despite {impl.discipline!r} discipline")


def _eval_operator(node: Node, concept: str, inputs: list[Dataset],
                   taxonomy, strict: bool, trace: ExecutionTrace,
                   measure: bool = False) -> Dataset:
    impl = taxonomy.impl_for(concept) if taxonomy is not None else REGISTRY.get(concept)
    if impl is None:
        raise ExecutionError(f"no implementation registered for {concept!r}")
    t = trace.of(node.id)
    start = time.perf_counter()
    out_records: list[dict] = []
    consumed = sum(len(ds) for ds in inputs)
    if impl.record_fn is not None:
        if len(inputs) != 1:
            raise ExecutionError(f"{concept} expects one input")
        for rec in inputs[0]:
            outs = impl.record_fn(rec, node)
            t.invocations += 1
            if strict:
                _check_record_metadata(impl, node, rec, outs)
            if measure:
                t.annotations += _annotation_delta(impl, rec, outs)
            out_records.extend(outs)
    else:
        if len(inputs) != impl.arity:
            raise ExecutionError(
                f"{concept} expects {impl.arity} inputs, got {len(inputs)}")
        out_records = impl.bag_fn(inputs, node)
        t.invocations += 1
    t.elapsed += time.perf_counter() - start
    t.consumed += consumed
    t.produced += len(out_records)
    if strict and impl.io_ratio == "eq" and impl.bag_fn is not None \
            and len(out_records) != consumed:
        raise MetadataViolation(
            f"{node.id} ({concept}) declares |I|=|O| but {consumed} -> {len(out_records)}")
    return Dataset(Record(r) for r in out_records)


def _eval_complex(node: Node, concept: str, inputs: list[Dataset], taxonomy,
                  strict: bool, trace: ExecutionTrace,
                  measure: bool = False) -> Dataset:
    chain = taxonomy.parts.get(concept)
    if not chain:
        raise ExecutionError(f"complex operator {concept} has no hasPart mapping")
    comp_cfg = node.config.get("components", {})
    data = inputs
    for comp in chain:
        local = comp.split(":", 1)[-1]
        sub = Node(id=node.id, kind="op", op=comp,
                   config=comp_cfg.get(local, {}).get("config",
                                                      comp_cfg.get(local, {})))
        if taxonomy.operator_kind(comp) == "complex":
            out = _eval_complex(sub, comp, data, taxonomy, strict, trace, measure)
        else:
            out = _eval_operator(sub, comp, data, taxonomy, strict, trace, measure)
        data = [out]
    return data[0]


def run(d: Dataflow, sources: dict[str, Dataset], taxonomy,
        strict: bool = False, measure: bool = False, cache: dict | None = None,
        ) -> tuple[dict[str, Dataset], ExecutionTrace]:
    """Evaluate the dataflow over the bound source datasets.

    Returns one dataset per sink (keyed by sink name or id) and a trace.
    ``cache`` optionally memoizes operator applications across runs (keyed by
    instance id and input content); cached hits skip trace accounting, so use
    it only for output comparison, never for sampling.
    """
    trace = ExecutionTrace()
    values: dict[tuple, Dataset] = {}
    outputs: dict[str, Dataset] = {}
    for nid in topological_order(d):
        n = d.node(nid)
        if n.kind == "source":
            key = n.ref or n.id
            if key not in sources:
                raise ExecutionError(f"source {nid} not bound (ref {key!r})")
            values[(nid, 0)] = sources[key]
            continue
        ins = [values[(e.src, e.src_port)] for e in d.in_edges(nid)]
        if n.kind == "sink":
            outputs[n.name or n.id] = ins[0]
            continue
        concept = taxonomy.find(n.op)
        if concept is None:
            raise ExecutionError(f"unknown operator concept {n.op!r} at {nid}")
        ckey = None
        if cache is not None:
            ckey = (nid, tuple(ds.fingerprint() for ds in ins))
            hit = cache.get(ckey)
            if hit is not None:
                values[(nid, 0)] = hit
                continue
        if taxonomy.operator_kind(concept) == "complex":
            out = _eval_complex(n, concept, ins, taxonomy, strict, trace, measure)
        else:
            out = _eval_operator(n, concept, ins, taxonomy, strict, trace, measure)
        t = trace.of(nid)
        t.entered += sum(len(ds) for ds in ins)
        t.emitted += len(out)
        if ckey is not None:
            cache[ckey] = out
        values[(nid, 0)] = out
    return outputs, trace


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

_SENTENCE_TEMPLATES = (
    ("{p} works at {c}.", True),
    ("{p} joined {c} in {year}.", True),
    ("{p} leads the research group at {c}.", True),
    ("{c} announced new products.", False),
    ("{p} visited the harbor downtown.", False),
    ("The quarterly report was mild and short.", False),
    ("{p} met {p2} downtown.", False),
    ("Analysts praised {c} for steady growth.", False),
)

_HTML_TAGS = ("<p>", "</p>", "<b>", "</b>", "<br>", "<div class=x>")


def generate_corpus(config: dict, seed: int) -> Dataset:
    """Deterministic synthetic news articles exercising every shipped
    operator family: duplicates, person/company mentions, relation
    sentences, optional HTML markup."""
    rng = random.Random(seed)
    docs = config.get("docs", 100)
    dup_rate = config.get("duplicate_rate", 0.0)
    y0, y1 = config.get("year_range", [2005, 2015])
    rel_rate = config.get("relation_rate", 0.5)
    html = config.get("html", False)
    pers_rate = config.get("person_rate", 0.7)
    comp_rate = config.get("company_rate", 0.7)
    records: list[dict] = []
    next_id = 0
    for _ in range(docs):
        n_sent = rng.randint(config.get("min_sentences", 1),
                             config.get("max_sentences", 4))
        year = rng.randint(y0, y1)
        sentences = []
        for _ in range(n_sent):
            p = rng.choice(PERSON_DICT)
            p2 = rng.choice(PERSON_DICT)
            c = rng.choice(COMPANY_DICT)
            want_rel = rng.random() < rel_rate
            pool = [t for t, is_rel in _SENTENCE_TEMPLATES if is_rel == want_rel]
            tmpl = rng.choice(pool)
            if not want_rel:
                if rng.random() > pers_rate:
                    tmpl = tmpl.replace("{p}", "the manager").replace("{p2}", "a colleague")
                if rng.random() > comp_rate:
                    tmpl = tmpl.replace("{c}", "the firm")
            s = tmpl.format(p=p, p2=p2, c=c, year=year)
            if html:
                s = rng.choice(_HTML_TAGS) + s
            sentences.append(s)
        text = " ".join(sentences)
        records.append({"id": next_id, "text": text, "year": year})
        next_id += 1
        if rng.random() < dup_rate:
            records.append({"id": next_id, "text": text, "year": year})
            next_id += 1
    return Dataset(Record(r) for r in records)


# --------------------------------------------------------------------------
# equivalence checking
# --------------------------------------------------------------------------

@dataclass
class EquivalenceVerdict:
    equivalent: bool
    seed: Optional[int] = None
    detail: str = ""

    def __bool__(self) -> bool:
        return self.equivalent


def check_equivalence(d1: Dataflow, d2: Dataflow, taxonomy,
                      corpus_config: Optional[dict] = None,
                      seeds: int = 20, base_seed: int = 1000) -> EquivalenceVerdict:
    """Run both dataflows on seeded random corpora; first counterexample wins."""
    cfg = corpus_config or {"docs": 60, "duplicate_rate": 0.2}
    src_ids1 = sorted(n.ref or n.id for n in d1.sources())
    src_ids2 = sorted(n.ref or n.id for n in d2.sources())
    if src_ids1 != src_ids2:
        return EquivalenceVerdict(False, None, "source sets differ")
    for k in range(seeds):
        seed = base_seed + k
        sources = {ref: generate_corpus(cfg, seed + 31 * i)
                   for i, ref in enumerate(src_ids1)}
        out1, _ = run(d1, sources, taxonomy)
        out2, _ = run(d2, sources, taxonomy)
        if sorted(out1) != sorted(out2):
            return EquivalenceVerdict(False, seed, "sink sets differ")
        for name in out1:
            if not bag_equal(out1[name], out2[name]):
                return EquivalenceVerdict(
                    False, seed, f"sink {name!r} outputs differ at seed {seed}")
    return EquivalenceVerdict(True)
