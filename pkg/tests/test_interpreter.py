import pytest

from sofa.dataflow import Dataflow, Edge, Node, WriteDecl
from sofa.datamodel import AttributePath, Dataset, Record, bag_equal, parse_paths
from sofa.interpreter import (
    ExecutionError,
    MetadataViolation,
    OperatorImpl,
    check_equivalence,
    generate_corpus,
    run,
    split_sentences,
    stem_word,
)


def flow(nodes, edges):
    return Dataflow(nodes, [Edge(*e) for e in edges])


def op(nid, concept, config=None, reads=(), writes=()):
    return Node(nid, "op", op=concept, config=config or {},
                reads=parse_paths(reads),
                writes=tuple(WriteDecl(AttributePath.parse(p), m) for p, m in writes))


def src(schema, ref="in", nid="s"):
    return Node(nid, "source", ref=ref, schema=parse_paths(schema))


SINK = Node("k", "sink", name="out")


def run1(taxonomy, nodes, edges, records, strict=True):
    d = flow(nodes, edges)
    outs, trace = run(d, {"in": Dataset(Record(r) for r in records)},
                      taxonomy, strict=strict)
    return outs["out"], trace


def test_identity_flow(taxonomy):
    d = flow([src(["x"]), SINK], [("s", 0, "k", 0)])
    ds = Dataset([Record({"x": 1}), Record({"x": 2})])
    outs, _ = run(d, {"in": ds}, taxonomy)
    assert bag_equal(outs["out"], ds)


def test_missing_impl_is_execution_error(taxonomy):
    d = flow([src(["x"]), op("t", "base:theta-join"), SINK],
             [("s", 0, "t", 0), ("t", 0, "k", 0)])
    with pytest.raises(ExecutionError):
        run(d, {"in": Dataset([Record({"x": 1})])}, taxonomy)


def test_fltr_predicates(taxonomy):
    recs = [{"year": 2009}, {"year": 2012}, {"other": 1}]
    out, _ = run1(taxonomy,
                  [src(["year"]),
                   op("f", "base:fltr",
                      {"pred": {"path": "year", "op": "gt", "value": 2010}},
                      reads=["year"]), SINK],
                  [("s", 0, "f", 0), ("f", 0, "k", 0)], recs)
    assert [r.root for r in out.canonical()] == [{"year": 2012}]


def test_fltr_count_where(taxonomy):
    recs = [{"es": [{"t": "pers"}, {"t": "comp"}]}, {"es": [{"t": "comp"}]}]
    out, _ = run1(taxonomy,
                  [src(["es"]),
                   op("f", "base:fltr",
                      {"pred": {"path": "es", "op": "count_where_gt",
                                "where": {"field": "t", "equals": "pers"},
                                "value": 0}}, reads=["es"]), SINK],
                  [("s", 0, "f", 0), ("f", 0, "k", 0)], recs)
    assert len(out) == 1


def test_prjt(taxonomy):
    out, _ = run1(taxonomy,
                  [src(["a", "b"]),
                   op("p", "base:prjt", {"keep": ["a"]}, reads=["a"]), SINK],
                  [("s", 0, "p", 0), ("p", 0, "k", 0)],
                  [{"a": 1, "b": 2}])
    assert out.canonical()[0].root == {"a": 1}


def test_trnsf_exprs(taxonomy):
    out, _ = run1(taxonomy,
                  [src(["t"]),
                   op("x", "base:trfrc",
                      {"set": [{"path": "lo", "expr": {"lower": "t"}},
                               {"path": "n", "expr": {"len": "t"}}]},
                      reads=["t"],
                      writes=[("lo", "set"), ("n", "set")]), SINK],
                  [("s", 0, "x", 0), ("x", 0, "k", 0)], [{"t": "AbC"}])
    assert out.canonical()[0].root == {"t": "AbC", "lo": "abc", "n": 3}


def test_nst_unnst(taxonomy):
    out, _ = run1(taxonomy,
                  [src(["a", "b"]),
                   op("n", "base:nst", {"paths": ["a", "b"], "as": "w"},
                      reads=["a", "b"]), SINK],
                  [("s", 0, "n", 0), ("n", 0, "k", 0)], [{"a": 1, "b": 2}])
    assert out.canonical()[0].root == {"w": {"a": 1, "b": 2}}
    out, _ = run1(taxonomy,
                  [src(["es"]),
                   op("u", "base:unnst", {"path": "es", "as": "e"},
                      reads=["es"]), SINK],
                  [("s", 0, "u", 0), ("u", 0, "k", 0)],
                  [{"es": [1, 2, 3]}])
    assert [r.root["e"] for r in out.canonical()] == [1, 2, 3]


def test_equi_join(taxonomy):
    d = flow(
        [src(["k1", "a"], ref="l", nid="L"), src(["k1", "b"], ref="r", nid="R"),
         op("j", "base:equi-join", {"on": [["k1"], ["k1"]]}), SINK],
        [("L", 0, "j", 0), ("R", 0, "j", 1), ("j", 0, "k", 0)])
    outs, _ = run(d, {
        "l": Dataset([Record({"k1": 1, "a": "x"}), Record({"k1": 2, "a": "y"})]),
        "r": Dataset([Record({"k1": 1, "b": "z"})]),
    }, taxonomy)
    assert [r.root for r in outs["out"].canonical()] == [
        {"k1": 1, "a": "x", "b": "z"}]


def test_grp_aggregates(taxonomy):
    out, _ = run1(taxonomy,
                  [src(["g", "v"]),
                   op("g1", "base:grp",
                      {"by": ["g"], "aggs": {"n": {"fn": "count"},
                                             "tot": {"fn": "sum", "path": "v"}}},
                      reads=["g", "v"], writes=[("n", "set"), ("tot", "set")]),
                   SINK],
                  [("s", 0, "g1", 0), ("g1", 0, "k", 0)],
                  [{"g": "a", "v": 1}, {"g": "a", "v": 2}, {"g": "b", "v": 5}])
    rows = {r.root["g"]: r.root for r in out}
    assert rows["a"] == {"g": "a", "n": 2, "tot": 3}
    assert rows["b"] == {"g": "b", "n": 1, "tot": 5}


def test_union_all_keeps_duplicates(taxonomy):
    d = flow(
        [src(["x"], ref="l", nid="L"), src(["x"], ref="r", nid="R"),
         op("u", "base:union-all", {}), SINK],
        [("L", 0, "u", 0), ("R", 0, "u", 1), ("u", 0, "k", 0)])
    outs, _ = run(d, {"l": Dataset([Record({"x": 1})]),
                      "r": Dataset([Record({"x": 1})])}, taxonomy)
    assert len(outs["out"]) == 2


def test_sentence_splitting_guards_abbreviations():
    parts = split_sentences("Dr. Smith visited Acme Corp. He left early.")
    assert list(parts) == ["Dr. Smith visited Acme Corp.", "He left early."]


def test_stemmer():
    assert stem_word("working") == "work"
    assert stem_word("announces") == "announc"
    assert stem_word("was") == "was"  # too short to strip


def test_annotators_chain(taxonomy):
    text = "Alice Marsh works at Acme Corp. Bob Keller visited the harbor."
    nodes = [
        src(["id", "text", "year"]),
        op("sent", "ie:anntt-sent"),
        op("pers", "ie:anntt-ent-pers"),
        op("comp", "ie:anntt-ent-comp"),
        op("pos", "ie:anntt-pos"),
        op("rel", "ie:anntt-rel-pc"),
        SINK,
    ]
    edges = [("s", 0, "sent", 0), ("sent", 0, "pers", 0), ("pers", 0, "comp", 0),
             ("comp", 0, "pos", 0), ("pos", 0, "rel", 0), ("rel", 0, "k", 0)]
    out, _ = run1(taxonomy, nodes, edges, [{"id": 1, "text": text, "year": 2012}])
    rec = out.canonical()[0]
    ents = {(e["t"], e["name"], e["sent"]) for e in rec.root["entities"]}
    assert ("pers", "Alice Marsh", 0) in ents
    assert ("comp", "Acme Corp", 0) in ents
    assert ("pers", "Bob Keller", 1) in ents
    rels = rec.root["relations"]
    assert rels == [{"p": "Alice Marsh", "c": "Acme Corp", "sent": 0}]


def test_split_udf_redistributes_annotations(taxonomy):
    text = "Alice Marsh works at Acme Corp. Bob Keller visited the harbor."
    nodes = [
        src(["id", "text"]),
        op("sent", "ie:anntt-sent"),
        op("pers", "ie:anntt-ent-pers"),
        op("split", "ie:split-udf"),
        SINK,
    ]
    edges = [("s", 0, "sent", 0), ("sent", 0, "pers", 0),
             ("split", 0, "k", 0), ("pers", 0, "split", 0)]
    out, _ = run1(taxonomy, nodes, edges, [{"id": 1, "text": text}])
    by_sent = {r.root["sentences"][0]["i"]: r.root for r in out}
    assert len(by_sent) == 2
    assert [e["name"] for e in by_sent[0]["entities"]] == ["Alice Marsh"]
    assert [e["name"] for e in by_sent[1]["entities"]] == ["Bob Keller"]
    assert by_sent[0]["text"] == "Alice Marsh works at Acme Corp."


def test_mrg_merges_annotation_arrays(taxonomy):
    d = flow(
        [src(["id", "entities"], ref="l", nid="L"),
         src(["id", "entities"], ref="r", nid="R"),
         op("m", "ie:mrg", {"on": "id", "merge": ["entities"]}), SINK],
        [("L", 0, "m", 0), ("R", 0, "m", 1), ("m", 0, "k", 0)])
    l = Dataset([Record({"id": 1, "entities": [{"t": "pers", "name": "A", "sent": 0}]})])
    r = Dataset([Record({"id": 1, "entities": [{"t": "comp", "name": "B", "sent": 0}]})])
    outs, _ = run(d, {"l": l, "r": r}, taxonomy)
    rec = outs["out"].canonical()[0].root
    assert {e["name"] for e in rec["entities"]} == {"A", "B"}
    # symmetric: swapping inputs yields the same bag
    outs2, _ = run(d, {"l": r, "r": l}, taxonomy)
    assert bag_equal(outs["out"], outs2["out"])


def test_rmark_masks_tags_and_stored_sentences(taxonomy):
    text = "<p>Alice works. <b>Bob rests."
    out, _ = run1(taxonomy,
                  [src(["text"]), op("sent", "ie:anntt-sent"),
                   op("m", "web:rmark"), SINK],
                  [("s", 0, "sent", 0), ("sent", 0, "m", 0), ("m", 0, "k", 0)],
                  [{"text": text}])
    rec = out.canonical()[0].root
    assert rec["text"] == "%%%Alice works. %%%Bob rests."
    assert rec["sentences"][0]["s"] == "%%%Alice works."


def test_dc_pipeline_duplicate_removal(taxonomy):
    recs = [
        {"id": 1, "text": "Same story here.", "year": 2010},
        {"id": 2, "text": "Same story here.", "year": None},
        {"id": 3, "text": "Different story.", "year": 2012},
    ]
    out, _ = run1(taxonomy,
                  [src(["id", "text", "year"]),
                   op("r", "dc:rdup", {}), SINK],
                  [("s", 0, "r", 0), ("r", 0, "k", 0)], recs, strict=False)
    rows = out.canonical()
    assert len(rows) == 2
    merged = [r.root for r in rows if r.root["text"] == "Same story here."][0]
    assert merged["year"] == 2010  # survivorship fills the null


def test_scrb_repairs_or_drops(taxonomy):
    recs = [{"year": 2010}, {"year": "bad"}, {"year": None}]
    out, _ = run1(taxonomy,
                  [src(["year"]),
                   op("c", "dc:scrb",
                      {"rules": [{"path": "year", "require": "int",
                                  "action": "default", "default": 0}]}),
                   SINK],
                  [("s", 0, "c", 0), ("c", 0, "k", 0)], recs, strict=False)
    years = sorted(r.root["year"] for r in out)
    assert years == [0, 0, 2010]


def test_lnkrc_links_matching_records(taxonomy):
    d = flow(
        [src(["id", "key1"], ref="l", nid="L"), src(["id", "key1"], ref="r", nid="R"),
         op("ln", "dc:lnkrc", {"on": ["key1", "key1"]}), SINK],
        [("L", 0, "ln", 0), ("R", 0, "ln", 1), ("ln", 0, "k", 0)])
    outs, _ = run(d, {
        "l": Dataset([Record({"id": 1, "key1": "a"})]),
        "r": Dataset([Record({"id": 9, "key1": "a"}), Record({"id": 8, "key1": "b"})]),
    }, taxonomy)
    assert outs["out"].canonical()[0].root["links"] == [{"ref": 9}]


def test_generate_corpus_deterministic():
    a = generate_corpus({"docs": 30, "duplicate_rate": 0.3}, seed=5)
    b = generate_corpus({"docs": 30, "duplicate_rate": 0.3}, seed=5)
    assert bag_equal(a, b)
    c = generate_corpus({"docs": 30, "duplicate_rate": 0.3}, seed=6)
    assert not bag_equal(a, c)


def test_generate_corpus_duplicate_rate():
    ds = generate_corpus({"docs": 200, "duplicate_rate": 0.3}, seed=1)
    texts = [r.root["text"] for r in ds]
    dups = len(texts) - len(set(texts))
    assert 30 <= dups <= 90  # ~60 expected


def test_corpus_without_entities_yields_no_relations(taxonomy):
    ds = generate_corpus({"docs": 10, "person_rate": 0.0, "company_rate": 0.0,
                          "relation_rate": 0.0}, seed=2)
    d = flow([src(["id", "text", "year"]), op("sent", "ie:anntt-sent"),
              op("pers", "ie:anntt-ent-pers"), op("comp", "ie:anntt-ent-comp"),
              op("pos", "ie:anntt-pos"), op("rel", "ie:anntt-rel-pc"), SINK],
             [("s", 0, "sent", 0), ("sent", 0, "pers", 0), ("pers", 0, "comp", 0),
              ("comp", 0, "pos", 0), ("pos", 0, "rel", 0), ("rel", 0, "k", 0)])
    outs, _ = run(d, {"in": ds}, taxonomy)
    assert all(r.root["relations"] == [] for r in outs["out"])


def test_check_equivalence_self(fixture_cache):
    fx = fixture_cache("parallel-annotate-merge")
    assert check_equivalence(fx.dataflow, fx.dataflow, fx.taxonomy, seeds=3)


def test_check_equivalence_filter_swap(taxonomy):
    def filters(order):
        f1 = op("f1", "base:fltr",
                {"pred": {"path": "year", "op": "gt", "value": 2008}},
                reads=["year"])
        f2 = op("f2", "base:fltr",
                {"pred": {"path": "year", "op": "lt", "value": 2014}},
                reads=["year"])
        a, b = (f1, f2) if order else (f2, f1)
        return flow([src(["id", "text", "year"]), a, b, SINK],
                    [("s", 0, a.id, 0), (a.id, 0, b.id, 0), (b.id, 0, "k", 0)])
    assert check_equivalence(filters(True), filters(False), taxonomy, seeds=5)


def test_check_equivalence_detects_difference(taxonomy):
    d1 = flow([src(["id", "text", "year"]),
               op("f", "base:fltr",
                  {"pred": {"path": "year", "op": "gt", "value": 2008}},
                  reads=["year"]), SINK],
              [("s", 0, "f", 0), ("f", 0, "k", 0)])
    d2 = flow([src(["id", "text", "year"]),
               op("f", "base:fltr",
                  {"pred": {"path": "year", "op": "gt", "value": 2009}},
                  reads=["year"]), SINK],
              [("s", 0, "f", 0), ("f", 0, "k", 0)])
    verdict = check_equivalence(d1, d2, taxonomy, seeds=5)
    assert not verdict
    assert verdict.seed is not None


def test_strict_mode_catches_lying_metadata(taxonomy):
    from sofa.interpreter import REGISTRY
    bad = OperatorImpl(
        "base:fltr", 1, "map", "RAAT", "preserve", "none", "eq",  # claims eq
        record_fn=lambda rec, node: [])  # drops everything
    original = REGISTRY["base:fltr"]
    REGISTRY["base:fltr"] = bad
    try:
        d = flow([src(["x"]),
                  op("f", "base:fltr", {"pred": {"path": "x", "op": "exists"}},
                     reads=["x"]), SINK],
                 [("s", 0, "f", 0), ("f", 0, "k", 0)])
        with pytest.raises(MetadataViolation):
            run(d, {"in": Dataset([Record({"x": 1})])}, taxonomy, strict=True)
    finally:
        REGISTRY["base:fltr"] = original


def test_annotators_never_mutate_existing_entries(taxonomy):
    pre = {"id": 1, "text": "Alice Marsh works at Acme Corp.",
           "entities": [{"t": "custom", "name": "Keep", "sent": 0}]}
    out, _ = run1(taxonomy,
                  [src(["id", "text", "entities"]),
                   op("sent", "ie:anntt-sent"),
                   op("pers", "ie:anntt-ent-pers"), SINK],
                  [("s", 0, "sent", 0), ("sent", 0, "pers", 0),
                   ("pers", 0, "k", 0)], [pre])
    ents = out.canonical()[0].root["entities"]
    assert {"t": "custom", "name": "Keep", "sent": 0} in ents
    assert any(e["t"] == "pers" for e in ents)


def test_run_is_deterministic(fixture_cache):
    fx = fixture_cache("news-relations")
    srcs = fx.sources(seed=8)
    out1, t1 = run(fx.dataflow, srcs, fx.taxonomy)
    out2, t2 = run(fx.dataflow, srcs, fx.taxonomy)
    for k in out1:
        assert out1[k].to_jsonl() == out2[k].to_jsonl()
    assert t1.units == t2.units


def test_fixture_flow_semantics(fixture_cache):
    # published-example semantics: only articles after the year bound remain,
    # annotated with persons and companies
    fx = fixture_cache("parallel-annotate-merge")
    srcs = fx.sources(seed=10)
    outs, _ = run(fx.dataflow, srcs, fx.taxonomy)
    result = outs["filtered"]
    assert len(result) > 0
    for rec in result:
        assert rec.root["year"] > 2010
        assert "entities" in rec.root


def test_trace_counts_are_consistent(fixture_cache):
    fx = fixture_cache("term-frequency")
    srcs = fx.sources(seed=8)
    _, trace = run(fx.dataflow, srcs, fx.taxonomy)
    splt = trace.ops["splt"]
    assert splt.entered == len(srcs["docs"])
    assert splt.emitted > splt.entered        # record expander
    assert splt.consumed >= splt.entered      # includes component work
