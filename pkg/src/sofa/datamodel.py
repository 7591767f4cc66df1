"""Semi-structured records, datasets, attribute paths and schema descriptors.

Values are plain Python trees: dict (object), list (array), str, int,
bool, None, and :class:`decimal.Decimal` for non-integer numbers. Decimals
are compared by exact normalized value, never by float, so bag equality
is deterministic.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from functools import lru_cache
from dataclasses import dataclass
from decimal import Decimal
from functools import cached_property
from typing import Any, Iterable, Iterator

Value = Any  # dict | list | str | int | bool | None | Decimal

WILDCARD = "*"

_STEP_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")


class PathError(ValueError):
    """Raised for malformed attribute paths."""


class WriteConflictError(TypeError):
    """Raised when an append write targets an existing non-array value."""


def _canon_decimal(d: Decimal) -> str:
    n = d.normalize()
    return format(n, "f")


def canonical_key(v: Value) -> tuple:
    """Hashable canonical form of a value tree (used for bag comparisons)."""
    t = type(v)
    if t is str:
        return ("str", v)
    if t is int:  # int canonical form equals the normalized decimal form
        return ("num", str(v))
    if t is dict:
        return ("obj", tuple(sorted((k, canonical_key(x)) for k, x in v.items())))
    if t is list:
        return ("arr", tuple(canonical_key(x) for x in v))
    if v is None:
        return ("null",)
    if t is bool:
        return ("bool", v)
    if isinstance(v, Decimal):
        return ("num", _canon_decimal(v))
    if isinstance(v, bool):
        return ("bool", v)
    if isinstance(v, int):
        return ("num", str(v))
    if isinstance(v, float):
        # floats may enter via ad-hoc construction; pin them down once
        return ("num", _canon_decimal(Decimal(repr(v))))
    if isinstance(v, str):
        return ("str", v)
    if isinstance(v, list):
        return ("arr", tuple(canonical_key(x) for x in v))
    if isinstance(v, dict):
        return ("obj", tuple(sorted((k, canonical_key(x)) for k, x in v.items())))
    raise TypeError(f"unsupported value type: {type(v)!r}")


def values_equal(a: Value, b: Value) -> bool:
    return canonical_key(a) == canonical_key(b)


def validate_tree(rec: "Record") -> None:
    """Deep well-formedness check: finite, acyclic, supported atomics."""
    _check_value(rec.root)


def _check_value(v: Value, depth: int = 0) -> None:
    if depth > 64:
        raise ValueError("value tree too deep (cycle?)")
    if isinstance(v, dict):
        for k, x in v.items():
            if not isinstance(k, str):
                raise ValueError("object field names must be strings")
            _check_value(x, depth + 1)
    elif isinstance(v, list):
        for x in v:
            _check_value(x, depth + 1)
    elif not (v is None or isinstance(v, (str, int, bool, Decimal, float))):
        raise TypeError(f"unsupported atomic: {type(v)!r}")


@dataclass(frozen=True)
class Record:
    """An immutable record: a value tree whose root is an object.

    Construction checks only the root; deep well-formedness is enforced at
    parse boundaries via :func:`validate_tree`."""

    root: dict

    def __post_init__(self) -> None:
        if not isinstance(self.root, dict):
            raise TypeError("record root must be an object")

    @cached_property
    def key(self) -> tuple:
        return canonical_key(self.root)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Record) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        return f"Record({self.root!r})"

    @staticmethod
    def from_json(text: str) -> "Record":
        rec = Record(json.loads(text, parse_float=Decimal))
        validate_tree(rec)
        return rec

    def to_json(self) -> str:
        return json.dumps(self.root, default=_json_default, sort_keys=True,
                          ensure_ascii=False)


def _json_default(v):
    if isinstance(v, Decimal):
        return float(v)
    raise TypeError(f"not JSON serializable: {type(v)!r}")


class Dataset:
    """An unordered bag (multiset) of records."""

    def __init__(self, records: Iterable[Record] = ()) -> None:
        self.records: list[Record] = [
            r if isinstance(r, Record) else Record(r) for r in records
        ]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def counter(self) -> Counter:
        return Counter(r.key for r in self.records)

    def fingerprint(self) -> int:
        """Content hash (order-insensitive); cached after first computation."""
        fp = getattr(self, "_fp", None)
        if fp is None:
            fp = hash(tuple(sorted(r.key for r in self.records)))
            self._fp = fp
        return fp

    def canonical(self) -> list[Record]:
        """Records in a canonical order; for golden files and diffs only."""
        return sorted(self.records, key=lambda r: r.key)

    @staticmethod
    def from_jsonl(text: str) -> "Dataset":
        recs = [Record.from_json(line) for line in text.splitlines() if line.strip()]
        return Dataset(recs)

    def to_jsonl(self) -> str:
        return "\n".join(r.to_json() for r in self.canonical()) + ("\n" if self.records else "")


def bag_equal(a: Dataset, b: Dataset) -> bool:
    """True iff both datasets hold the same records with the same multiplicities."""
    return a.counter() == b.counter()


@dataclass(frozen=True)
class AttributePath:
    """Dot-separated attribute path; ``*`` matches any array element / field."""

    steps: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.steps:
            raise PathError("attribute path must be non-empty")
        for s in self.steps:
            if s != WILDCARD and not _STEP_RE.match(s):
                raise PathError(f"invalid path step: {s!r}")

    @staticmethod
    @lru_cache(maxsize=4096)
    def parse(text: str) -> "AttributePath":
        return AttributePath(tuple(text.split(".")))

    def __str__(self) -> str:
        return ".".join(self.steps)

    @property
    def has_wildcard(self) -> bool:
        return WILDCARD in self.steps

    def is_prefix_of(self, other: "AttributePath") -> bool:
        """Prefix-or-equal, with wildcard steps matching any step."""
        if len(self.steps) > len(other.steps):
            return False
        return all(
            a == b or a == WILDCARD or b == WILDCARD
            for a, b in zip(self.steps, other.steps)
        )

    def overlaps(self, other: "AttributePath") -> bool:
        """Prefix-or-equal in either direction; the path conflict notion."""
        return self.is_prefix_of(other) or other.is_prefix_of(self)


def parse_paths(texts: Iterable[str]) -> frozenset[AttributePath]:
    return frozenset(AttributePath.parse(t) for t in texts)


@dataclass(frozen=True)
class SchemaDescriptor:
    """Set of attribute paths known (or required) at a port."""

    attributes: frozenset[AttributePath]

    @staticmethod
    def of(*texts: str) -> "SchemaDescriptor":
        return SchemaDescriptor(parse_paths(texts))

    def union(self, other: "SchemaDescriptor") -> "SchemaDescriptor":
        return SchemaDescriptor(self.attributes | other.attributes)

    def add(self, paths: Iterable[AttributePath]) -> "SchemaDescriptor":
        return SchemaDescriptor(self.attributes | frozenset(paths))

    def remove(self, paths: Iterable[AttributePath]) -> "SchemaDescriptor":
        drop = frozenset(paths)
        return SchemaDescriptor(frozenset(
            a for a in self.attributes
            if not any(d.overlaps(a) for d in drop)
        ))

    def covers(self, path: AttributePath) -> bool:
        return any(path.overlaps(a) for a in self.attributes)

    def __str__(self) -> str:
        return "{" + ", ".join(sorted(str(a) for a in self.attributes)) + "}"


EMPTY_SCHEMA = SchemaDescriptor(frozenset())


def schema_contains(producer: SchemaDescriptor, consumer: SchemaDescriptor) -> bool:
    """True iff every consumer attribute is present in, or nested under/over,
    some producer attribute (prefix-or-equal overlap)."""
    return all(producer.covers(p) for p in consumer.attributes)


def read_path(r: Record, p: AttributePath) -> list[Value]:
    """All values reachable at ``p``; wildcards fan out; absent paths yield []."""
    out: list[Value] = []

    def walk(v: Value, steps: tuple[str, ...]) -> None:
        if not steps:
            out.append(v)
            return
        head, rest = steps[0], steps[1:]
        if head == WILDCARD:
            if isinstance(v, list):
                for x in v:
                    walk(x, rest)
            elif isinstance(v, dict):
                for k in sorted(v):
                    walk(v[k], rest)
        elif isinstance(v, dict) and head in v:
            walk(v[head], rest)
        elif isinstance(v, list):
            # implicit fan-out over arrays on a named step
            for x in v:
                if isinstance(x, dict) and head in x:
                    walk(x[head], rest)

    walk(r.root, p.steps)
    return out


def write_path(r: Record, p: AttributePath, v: Value, mode: str = "set") -> Record:
    """Return a new record with ``v`` written at ``p``.

    mode="set" replaces; mode="append" requires the target to be absent or an
    array and extends it (by one element, or by all elements when ``v`` is a
    list). Wildcards are not allowed in write paths.
    """
    if p.has_wildcard:
        raise PathError("wildcard not allowed in write paths")
    if mode not in ("set", "append"):
        raise ValueError(f"unknown write mode: {mode!r}")

    def build(node: Value, steps: tuple[str, ...]) -> Value:
        head, rest = steps[0], steps[1:]
        base = dict(node) if isinstance(node, dict) else {}
        if rest:
            base[head] = build(base.get(head, {}), rest)
            return base
        if mode == "set":
            base[head] = v
            return base
        existing = base.get(head)
        if existing is None:
            base[head] = list(v) if isinstance(v, list) else [v]
        elif isinstance(existing, list):
            base[head] = existing + (list(v) if isinstance(v, list) else [v])
        else:
            raise WriteConflictError(
                f"append to non-array value at {p}: {type(existing).__name__}")
        return base

    return Record(build(r.root, p.steps))
