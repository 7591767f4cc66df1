import json
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sofa.datamodel import (
    AttributePath,
    Dataset,
    PathError,
    Record,
    SchemaDescriptor,
    WriteConflictError,
    bag_equal,
    canonical_key,
    read_path,
    schema_contains,
    write_path,
)


def rec(**kw):
    return Record(kw)


def test_bag_equal_empty():
    assert bag_equal(Dataset(), Dataset())


def test_bag_equal_permutation_invariance():
    r1, r2 = rec(a=1), rec(a=2)
    assert bag_equal(Dataset([r1, r1, r2]), Dataset([r2, r1, r1]))


def test_bag_equal_multiplicity():
    r1 = rec(a=1)
    assert not bag_equal(Dataset([r1]), Dataset([r1, r1]))


def test_decimal_equality_is_exact_not_float():
    a = Record({"x": Decimal("1.50")})
    b = Record({"x": Decimal("1.5")})
    c = Record({"x": Decimal("1.4999999999999999999")})
    assert a == b
    assert a != c
    assert canonical_key(Decimal("100")) == canonical_key(Decimal("1E+2"))


def test_read_path_simple():
    assert read_path(rec(a={"b": 1}), AttributePath.parse("a.b")) == [1]


def test_read_path_absent():
    assert read_path(rec(a={"b": 1}), AttributePath.parse("a.c")) == []


def test_read_path_wildcard_fanout():
    r = rec(es=[{"t": "P"}, {"t": "C"}])
    assert read_path(r, AttributePath.parse("es.*.t")) == ["P", "C"]


def test_write_path_set_adds_field():
    out = write_path(rec(a=1), AttributePath.parse("b"), 2, "set")
    assert out.root == {"a": 1, "b": 2}


def test_write_path_append_extends_array():
    out = write_path(rec(es=["x"]), AttributePath.parse("es"), "y", "append")
    assert out.root == {"es": ["x", "y"]}


def test_write_path_append_bootstraps_absent():
    out = write_path(rec(a=1), AttributePath.parse("es"), "y", "append")
    assert out.root == {"a": 1, "es": ["y"]}


def test_write_path_append_type_conflict():
    with pytest.raises(WriteConflictError):
        write_path(rec(es=1), AttributePath.parse("es"), "y", "append")


def test_write_path_rejects_wildcard():
    with pytest.raises(PathError):
        write_path(rec(a=1), AttributePath.parse("a.*"), 1, "set")


def test_write_preserves_untouched_fields_and_original():
    original = rec(a={"b": 1}, keep="me")
    out = write_path(original, AttributePath.parse("a.c"), 2, "set")
    assert out.root == {"a": {"b": 1, "c": 2}, "keep": "me"}
    assert original.root == {"a": {"b": 1}, "keep": "me"}


_names = st.sampled_from(["a", "b", "c", "d"])
_scalars = st.one_of(st.integers(-5, 5), st.text(max_size=3), st.booleans())


@st.composite
def _record_and_path(draw):
    root = {draw(_names): draw(_scalars) for _ in range(draw(st.integers(0, 3)))}
    steps = tuple(draw(_names) for _ in range(draw(st.integers(1, 3))))
    return Record(root), AttributePath(steps)


@given(_record_and_path(), _scalars)
@settings(max_examples=120)
def test_write_then_read_roundtrip(rp, value):
    r, p = rp
    try:
        out = write_path(r, p, value, "set")
    except WriteConflictError:
        return
    assert read_path(out, p) == [value]


@given(st.lists(st.dictionaries(_names, _scalars, max_size=3), max_size=6),
       st.lists(st.dictionaries(_names, _scalars, max_size=3), max_size=6))
@settings(max_examples=100)
def test_bag_equal_is_equivalence_relation(xs, ys):
    a = Dataset([Record(x) for x in xs])
    b = Dataset([Record(y) for y in ys])
    assert bag_equal(a, a)
    assert bag_equal(a, b) == bag_equal(b, a)
    shuffled = Dataset(list(reversed(a.records)))
    assert bag_equal(a, shuffled)
    if bag_equal(a, b) and bag_equal(b, shuffled):
        assert bag_equal(a, shuffled)


def test_schema_contains_examples():
    assert schema_contains(SchemaDescriptor.of("text", "year"),
                           SchemaDescriptor.of("text"))
    assert not schema_contains(SchemaDescriptor.of("text"),
                               SchemaDescriptor.of("text", "entities"))
    assert schema_contains(SchemaDescriptor.of(), SchemaDescriptor.of())


def test_schema_contains_nested_overlap():
    # a consumer may require below a produced subtree and above a produced leaf
    producer = SchemaDescriptor.of("sentences")
    assert schema_contains(producer, SchemaDescriptor.of("sentences.*.s"))
    producer = SchemaDescriptor.of("a.b.c")
    assert schema_contains(producer, SchemaDescriptor.of("a.b"))


@given(st.lists(_names, min_size=0, max_size=4),
       st.lists(_names, min_size=0, max_size=4),
       st.lists(_names, min_size=0, max_size=4))
@settings(max_examples=100)
def test_schema_contains_reflexive_transitive(xs, ys, zs):
    # transitivity checked over flat single-step descriptors
    a = SchemaDescriptor.of(*xs)
    b = SchemaDescriptor.of(*ys)
    c = SchemaDescriptor.of(*zs)
    assert schema_contains(a, a)
    if schema_contains(a, b) and schema_contains(b, c):
        assert schema_contains(a, c)


def test_attribute_path_validation():
    with pytest.raises(PathError):
        AttributePath(())
    with pytest.raises(PathError):
        AttributePath.parse("bad step")
    assert str(AttributePath.parse("es.*.t")) == "es.*.t"


def test_jsonl_roundtrip():
    ds = Dataset([rec(id=1, x=Decimal("2.5")), rec(id=2, x="s")])
    again = Dataset.from_jsonl(ds.to_jsonl())
    assert bag_equal(ds, again)


def test_record_json_is_canonical():
    a = Record(json.loads('{"b": 1, "a": 2}'))
    assert a.to_json() == '{"a": 2, "b": 1}'
