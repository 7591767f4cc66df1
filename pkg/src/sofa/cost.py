"""Cardinality propagation, the weighted operator cost model and
sampling-based statistics acquisition."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Optional

from .dataflow import Dataflow, topological_order
from .interpreter import Dataset, run

if TYPE_CHECKING:  # pragma: no cover
    from .presto import Taxonomy

log = logging.getLogger("sofa.cost")

# measured seconds are mapped to abstract cost units by a fixed constant,
# recorded in emitted stats files
TIME_UNITS_PER_SECOND = 1_000_000.0


class CostError(ValueError):
    pass


@dataclass
class OperatorStats:
    sel: float = 1.0      # output records per input record
    c: float = 1.0        # CPU units per processed record
    s: float = 0.0        # startup units
    d: float = 1.0        # I/O units per input record
    n: float = 1.0        # ship units per output record
    proj: Optional[float] = None  # annotations per record (annotators only)

    def __post_init__(self) -> None:
        for name in ("sel", "c", "s", "d", "n"):
            if getattr(self, name) < 0:
                raise CostError(f"negative statistic {name}")
        if self.proj is not None and self.proj < 0:
            raise CostError("negative projectivity")


DEFAULT_STATS = OperatorStats()


@dataclass(frozen=True)
class CostWeights:
    u: float = 1.0  # I/O component
    v: float = 1.0  # ship component
    w: float = 1.0  # CPU component

    def __post_init__(self) -> None:
        if self.u < 0 or self.v < 0 or self.w < 0:
            raise CostError("weights must be non-negative")
        if self.u == self.v == self.w == 0:
            raise CostError("weights must not all be zero")


@dataclass
class OperatorCost:
    r: float
    cpu: float
    io: float
    ship: float

    @property
    def total(self) -> float:
        return self.cpu + self.io + self.ship


@dataclass
class CostReport:
    operators: dict[str, OperatorCost] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return sum(oc.total for oc in self.operators.values())

    def as_dict(self) -> dict:
        return {
            "operators": {
                nid: {"r": oc.r, "cpu": oc.cpu, "io": oc.io,
                      "ship": oc.ship, "total": oc.total}
                for nid, oc in sorted(self.operators.items())
            },
            "total": self.total,
        }


@dataclass
class StatsBundle:
    operators: dict[str, OperatorStats]
    sources: dict[str, float]
    weights: CostWeights = CostWeights()

    def for_node(self, nid: str) -> OperatorStats:
        st = self.operators.get(nid)
        if st is None:
            log.warning("no statistics for %s; using neutral defaults", nid)
            return DEFAULT_STATS
        return st

    # -- file format --------------------------------------------------------
    @staticmethod
    def from_json(text: str) -> "StatsBundle":
        doc = json.loads(text)
        ops = {}
        for nid, st in doc.get("operators", {}).items():
            ops[nid] = OperatorStats(
                sel=st.get("sel", 1.0), c=st.get("c", 1.0), s=st.get("s", 0.0),
                d=st.get("d", 1.0), n=st.get("n", 1.0), proj=st.get("proj"))
        w = doc.get("weights", {})
        return StatsBundle(
            operators=ops,
            sources={k: float(v) for k, v in doc.get("sources", {}).items()},
            weights=CostWeights(w.get("u", 1.0), w.get("v", 1.0), w.get("w", 1.0)))

    def to_json(self) -> str:
        doc = {
            "operators": {
                nid: {k: v for k, v in {
                    "sel": st.sel, "c": st.c, "s": st.s, "d": st.d, "n": st.n,
                    "proj": st.proj}.items() if v is not None}
                for nid, st in sorted(self.operators.items())
            },
            "weights": {"u": self.weights.u, "v": self.weights.v, "w": self.weights.w},
            "sources": dict(sorted(self.sources.items())),
            "timeUnitsPerSecond": TIME_UNITS_PER_SECOND,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def poisson_tail_gt(lam: float, threshold: int) -> float:
    """P(Poisson(lam) > threshold)."""
    if lam <= 0:
        return 0.0
    cdf = sum(math.exp(-lam) * lam ** k / math.factorial(k)
              for k in range(threshold + 1))
    return max(0.0, 1.0 - cdf)


def _annotation_filter_threshold(node) -> Optional[int]:
    pred = node.config.get("pred", {})
    if pred.get("op") in ("count_gt", "count_where_gt"):
        return int(pred.get("value", 0))
    return None


def effective_selectivity(d: Dataflow, nid: str, stats: StatsBundle,
                          explicit: set[str]) -> float:
    """Selectivity of a node; for annotation-count filters without an explicit
    figure, derived from the upstream annotator's projectivity via a Poisson
    model."""
    st = stats.for_node(nid)
    if nid in explicit:
        return st.sel
    node = d.node(nid)
    if node.kind != "op":
        return st.sel
    threshold = _annotation_filter_threshold(node)
    if threshold is None:
        return st.sel
    best: Optional[float] = None
    for up in _ancestor_ops(d, nid):
        up_stats = stats.operators.get(up)
        if up_stats is not None and up_stats.proj is not None:
            best = up_stats.proj if best is None else best + up_stats.proj
    if best is None:
        return st.sel
    return poisson_tail_gt(best, threshold)


def _ancestor_ops(d: Dataflow, nid: str) -> list[str]:
    seen: set[str] = set()
    work = list(d.predecessors(nid))
    out = []
    while work:
        m = work.pop()
        if m in seen:
            continue
        seen.add(m)
        if d.node(m).kind == "op":
            out.append(m)
        work.extend(d.predecessors(m))
    return sorted(out)


def propagate_cardinalities(d: Dataflow, stats: StatsBundle) -> dict[str, float]:
    """Estimated processed-record counts: r_i is the sum over incoming edges
    of the producer's estimated output (r_h * sel_h)."""
    explicit = set(stats.operators)
    r: dict[str, float] = {}
    out_est: dict[str, float] = {}
    for nid in topological_order(d):
        node = d.node(nid)
        if node.kind == "source":
            if nid not in stats.sources and (node.ref or nid) not in stats.sources:
                raise CostError(f"missing source size for {nid}")
            size = stats.sources.get(nid, stats.sources.get(node.ref or nid))
            r[nid] = float(size)
            out_est[nid] = float(size)
            continue
        incoming = d.in_edges(nid)
        if node.kind == "sink":
            r[nid] = sum(out_est[e.src] for e in incoming)
            continue
        if not incoming:
            raise CostError(f"operator {nid} has no inputs")
        r[nid] = sum(out_est[e.src] for e in incoming)
        sel = effective_selectivity(d, nid, stats, explicit)
        out_est[nid] = r[nid] * sel
    return r


CostHook = Callable[[str, float, OperatorStats, CostWeights], OperatorCost]

COST_HOOKS: dict[str, CostHook] = {}


def register_cost_hook(name: str, fn: CostHook) -> None:
    COST_HOOKS[name] = fn


def _quadratic_join(nid: str, r: float, st: OperatorStats, w: CostWeights) -> OperatorCost:
    # pessimistic pairing cost for theta-style joins
    half = r / 2.0
    cpu = w.w * (st.c * half * half + st.s)
    return OperatorCost(r=r, cpu=cpu, io=w.u * st.d * r, ship=w.v * st.n * r * st.sel)


register_cost_hook("quadratic-join", _quadratic_join)


def operator_cost(nid: str, r: float, st: OperatorStats, weights: CostWeights,
                  hook: Optional[str] = None) -> OperatorCost:
    """cost = w*(c*r + s) + u*(d*r) + v*(n*r*sel), unless a registered custom
    hook overrides the formula."""
    if r < 0:
        raise CostError("negative cardinality")
    if hook is not None:
        fn = COST_HOOKS.get(hook)
        if fn is None:
            raise CostError(f"unknown cost hook {hook!r}")
        return fn(nid, r, st, weights)
    return OperatorCost(
        r=r,
        cpu=weights.w * (st.c * r + st.s),
        io=weights.u * (st.d * r),
        ship=weights.v * (st.n * r * st.sel),
    )


def plan_cost(d: Dataflow, stats: StatsBundle,
              taxonomy: Optional["Taxonomy"] = None) -> CostReport:
    """Total plan cost: sum of operator costs over all operator instances."""
    r = propagate_cardinalities(d, stats)
    explicit = set(stats.operators)
    report = CostReport()
    for node in d.operators():
        st = stats.for_node(node.id)
        sel = effective_selectivity(d, node.id, stats, explicit)
        st_eff = OperatorStats(sel=sel, c=st.c, s=st.s, d=st.d, n=st.n, proj=st.proj)
        hook = None
        if taxonomy is not None:
            concept = taxonomy.find(node.op)
            if concept is not None:
                hook = taxonomy.cost_hook(concept)
        report.operators[node.id] = operator_cost(
            node.id, r[node.id], st_eff, stats.weights, hook)
    return report


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------

def sample_stats(d: Dataflow, sources: dict[str, Dataset], taxonomy: "Taxonomy",
                 fraction: float = 0.05, seed: int = 7,
                 weights: CostWeights = CostWeights()) -> StatsBundle:
    """Run the interpreter on a seeded random sample and measure per-operator
    selectivity, projectivity and cost proxies."""
    import random

    if not 0 < fraction <= 1:
        raise CostError("fraction must be in (0, 1]")
    rng = random.Random(seed)
    sampled: dict[str, Dataset] = {}
    for ref, ds in sources.items():
        recs = ds.canonical()
        if fraction >= 1.0:
            chosen = recs
        else:
            k = max(1, int(round(len(recs) * fraction)))
            chosen = rng.sample(recs, k) if recs else []
        if not chosen:
            raise CostError(
                f"sample of source {ref!r} is empty; use a larger fraction")
        sampled[ref] = Dataset(chosen)

    _, trace = run(d, sampled, taxonomy, measure=True)
    ops: dict[str, OperatorStats] = {}
    for node in d.operators():
        t = trace.ops.get(node.id)
        if t is None or t.entered == 0:
            ops[node.id] = OperatorStats(sel=0.0 if t and t.emitted == 0 else 1.0)
            continue
        sel = t.emitted / t.entered
        per_record_seconds = t.elapsed / max(1, t.consumed)
        c_units = max(per_record_seconds * TIME_UNITS_PER_SECOND, 1e-3)
        proj = None
        if t.annotations:
            proj = t.annotations / t.entered
        ops[node.id] = OperatorStats(sel=sel, c=c_units, s=0.0, d=1.0, n=1.0,
                                     proj=proj)
    src_sizes = {(d.node(nid).ref or nid): float(len(ds))
                 for nid, ds in ((n.id, sources[n.ref or n.id]) for n in d.sources())}
    for n in d.sources():
        src_sizes[n.id] = float(len(sources[n.ref or n.id]))
    return StatsBundle(operators=ops, sources=src_sizes, weights=weights)
