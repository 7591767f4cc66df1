"""Command-line entry point: package introspection, optimization, execution,
statistics sampling, mode comparison and equivalence checking."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .baselines import OptimizerMode, compare_modes, enumerate_mode, reports_to_csv
from .cost import CostWeights, StatsBundle, sample_stats
from .dataflow import Dataflow, validate
from .datamodel import Dataset
from .enumerator import EnumerationConfig, OptimizeError, optimize, rank
from .fixtures import fixture_names, load_fixture
from .interpreter import REGISTRY, check_equivalence, run
from .precedence import build_precedence
from .presto import PackageError, Taxonomy, builtin_package_names, load_builtin
from .rewrite import QueryFacts, RuleSession

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_MISSING_STATS = 3


def _err(msg: str) -> None:
    print(f"sofa: {msg}", file=sys.stderr)


def _load_taxonomy(args) -> Taxonomy:
    t = Taxonomy(registry=REGISTRY)
    names = list(getattr(args, "packages", None) or [])
    if not names:
        names = ["base", "ie", "dc", "web"]
        env = os.environ.get("SOFA_PACKAGE_PATH")
        if env:
            for d in env.split(os.pathsep):
                for f in sorted(Path(d).glob("*.presto")):
                    names.append(str(f))
    builtins = set(builtin_package_names())
    for name in names:
        if name in builtins:
            load_builtin(t, name)
        else:
            t.load_package(Path(name).read_text("utf-8"), name_hint=name)
    return t.freeze()


def _load_plan(path: str) -> Dataflow:
    return Dataflow.from_json(Path(path).read_text("utf-8"))


def _load_stats(args) -> StatsBundle:
    stats = StatsBundle.from_json(Path(args.stats).read_text("utf-8"))
    if getattr(args, "weights", None):
        u, v, w = (float(x) for x in args.weights.split(","))
        stats.weights = CostWeights(u=u, v=v, w=w)
    return stats


def _load_sources(d: Dataflow, data_dir: str) -> dict[str, Dataset]:
    sources = {}
    for n in d.sources():
        ref = n.ref or n.id
        path = Path(data_dir) / f"{ref}.jsonl"
        if not path.exists():
            raise FileNotFoundError(f"no dataset for source {ref!r}: {path}")
        sources[ref] = Dataset.from_jsonl(path.read_text("utf-8"))
    return sources


def _validated(d: Dataflow, t: Taxonomy) -> int:
    violations = validate(d, t)
    if violations:
        for v in violations:
            _err(str(v))
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_packages(args) -> int:
    t = _load_taxonomy(args)
    if args.action == "list":
        for ns in t.packages:
            ops = [c for c in t.operator_ids() if c.startswith(ns + ":")]
            print(f"{ns}: {len(ops)} operators")
        print(f"properties: {len(t.properties)}")
        print(f"rewrite rules: {len(t.rewrite_rules)}")
        return EXIT_OK
    cid = t.find(args.concept)
    if cid is None:
        _err(f"unknown concept {args.concept!r}")
        return EXIT_VALIDATION
    c = t.operators[cid]
    print(f"{cid} ({c.kind})")
    print(f"  isA: {', '.join(sorted(c.parents))}")
    props = sorted(q for (o, q) in t.op_props if o in t.ancestors(cid))
    print(f"  properties: {', '.join(props) or '-'}")
    req = sorted(t.requirement_closure(cid))
    if req:
        print(f"  requires: {', '.join(req)}")
    if cid in t.parts:
        print(f"  parts: {' -> '.join(t.parts[cid])}")
    return EXIT_OK


def _enum_config(args) -> EnumerationConfig:
    return EnumerationConfig(
        prune=not getattr(args, "no_prune", False),
        passes=getattr(args, "pass_sel", "both"))


def cmd_optimize(args) -> int:
    t = _load_taxonomy(args)
    d = _load_plan(args.plan)
    code = _validated(d, t)
    if code:
        return code
    try:
        stats = _load_stats(args)
    except FileNotFoundError:
        _err(f"stats file not found: {args.stats}")
        return EXIT_MISSING_STATS
    cfg = _enum_config(args)
    mode = OptimizerMode(args.mode)
    if mode == OptimizerMode.SOFA:
        try:
            res = optimize(d, t, stats, cfg)
        except OptimizeError as exc:
            _err(str(exc))
            return EXIT_VALIDATION
        best, space = res.best, res.plan_space()
    else:
        space = enumerate_mode(mode, d, t, stats, cfg)
        best = rank(space)[0] if space else None
    if best is None:
        _err("no plan produced")
        return EXIT_VALIDATION
    out = Path(args.output or "best-plan.json")
    out.write_text(best.dataflow.to_json() + "\n")
    from .cost import plan_cost
    report = plan_cost(best.dataflow, stats, t).as_dict()
    report["planSpace"] = len(space)
    report["provenance"] = list(best.provenance)
    Path(args.report or (str(out) + ".cost.json")).write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    if args.emit_all:
        emit = Path(args.emit_all)
        emit.mkdir(parents=True, exist_ok=True)
        for i, p in enumerate(rank(space)):
            (emit / f"plan-{i:04d}.json").write_text(p.dataflow.to_json() + "\n")
            (emit / f"plan-{i:04d}.cost.json").write_text(json.dumps(
                {"rank": i, "cost": p.cost, "provenance": list(p.provenance)},
                indent=2) + "\n")
    print(f"best plan cost {best.cost:.3f} over {len(space)} alternatives -> {out}")
    return EXIT_OK


def cmd_explain(args) -> int:
    t = _load_taxonomy(args)
    d = _load_plan(args.plan)
    code = _validated(d, t)
    if code:
        return code
    if args.pass_sel == "expanded":
        d = t.expand_complex(d)
    facts = QueryFacts.from_dataflow(d, t)
    pg = build_precedence(d, t, facts, RuleSession(t, facts))
    print(pg.to_dot(d))
    return EXIT_OK


def cmd_run(args) -> int:
    t = _load_taxonomy(args)
    d = _load_plan(args.plan)
    code = _validated(d, t)
    if code:
        return code
    sources = _load_sources(d, args.data)
    outputs, trace = run(d, sources, t, strict=args.strict)
    outdir = Path(args.output or "out")
    outdir.mkdir(parents=True, exist_ok=True)
    for name, ds in sorted(outputs.items()):
        (outdir / f"{name}.jsonl").write_text(ds.to_jsonl())
        print(f"{name}: {len(ds)} records")
    print(f"trace units: {trace.units}")
    return EXIT_OK


def cmd_stats(args) -> int:
    t = _load_taxonomy(args)
    d = _load_plan(args.plan)
    code = _validated(d, t)
    if code:
        return code
    sources = _load_sources(d, args.data)
    bundle = sample_stats(d, sources, t, fraction=args.fraction, seed=args.seed)
    Path(args.output).write_text(bundle.to_json() + "\n")
    print(f"sampled statistics for {len(bundle.operators)} operators -> {args.output}")
    return EXIT_OK


def cmd_compare(args) -> int:
    t = _load_taxonomy(args)
    d = _load_plan(args.plan)
    code = _validated(d, t)
    if code:
        return code
    try:
        stats = _load_stats(args)
    except FileNotFoundError:
        _err(f"stats file not found: {args.stats}")
        return EXIT_MISSING_STATS
    modes = [OptimizerMode(m) for m in args.modes.split(",")]
    corpus = json.loads(Path(args.corpus).read_text()) if args.corpus else None
    sources = _load_sources(d, args.data) if args.data else None
    reports = compare_modes(d, t, stats, modes, corpus_config=corpus,
                            sources=sources, seed=args.seed)
    csv_text = reports_to_csv(reports)
    if args.output:
        Path(args.output).write_text(csv_text)
    print(csv_text, end="")
    return EXIT_OK


def cmd_check_equiv(args) -> int:
    t = _load_taxonomy(args)
    if len(args.plan) != 2:
        _err("check-equiv needs exactly two --plan arguments")
        return EXIT_USAGE
    d1, d2 = (_load_plan(p) for p in args.plan)
    for d in (d1, d2):
        code = _validated(d, t)
        if code:
            return code
    corpus = json.loads(Path(args.corpus).read_text()) if args.corpus else None
    verdict = check_equivalence(d1, d2, t, corpus_config=corpus,
                                seeds=args.seeds, base_seed=args.seed)
    if verdict:
        print(f"equivalent over {args.seeds} seeded corpora")
        return EXIT_OK
    print(f"counterexample: {verdict.detail}")
    return EXIT_VALIDATION


def cmd_rules_why(args) -> int:
    t = _load_taxonomy(args)
    d = _load_plan(args.plan)
    code = _validated(d, t)
    if code:
        return code
    facts = QueryFacts.from_dataflow(d, t)
    for nid in (args.x, args.y):
        if nid not in facts.instances:
            _err(f"no operator instance {nid!r} in the plan")
            return EXIT_VALIDATION
    session = RuleSession(t, facts)
    ok, tree = session.resolve_with_trace(args.x, args.y)
    print(f"reorder({args.x}, {args.y}): {'derivable' if ok else 'not derivable'}")
    print(tree.render(1))
    return EXIT_OK


def cmd_fixtures(args) -> int:
    if args.action == "list":
        for name in fixture_names():
            print(name)
        return EXIT_OK
    fx = load_fixture(args.name, level=args.level)
    outdir = Path(args.output or args.name)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "flow.json").write_text(fx.dataflow.to_json() + "\n")
    (outdir / "stats.json").write_text(fx.stats.to_json() + "\n")
    (outdir / "manifest.json").write_text(
        json.dumps(fx.manifest, indent=2, sort_keys=True) + "\n")
    for i, src in enumerate(fx.extra_sources):
        (outdir / f"extra-{i}.presto").write_text(src)
    data = outdir / "data"
    data.mkdir(exist_ok=True)
    for ref, ds in fx.sources(seed=args.seed).items():
        (data / f"{ref}.jsonl").write_text(ds.to_jsonl())
    print(f"fixture {fx.name} -> {outdir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sofa",
                                 description="semantics-aware dataflow optimizer")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, stats=False):
        p.add_argument("--packages", nargs="*", default=None,
                       help="package names or .presto paths (default: built-ins)")
        if stats:
            p.add_argument("--stats", required=True)
            p.add_argument("--weights", default=None, help="u,v,w")

    p = sub.add_parser("packages", help="inspect loaded operator packages")
    p.add_argument("action", choices=["list", "show"])
    p.add_argument("concept", nargs="?")
    common(p)
    p.set_defaults(fn=cmd_packages)

    p = sub.add_parser("optimize", help="enumerate and rank plan alternatives")
    p.add_argument("--plan", required=True)
    p.add_argument("--no-prune", action="store_true")
    p.add_argument("--emit-all", default=None)
    p.add_argument("--pass", dest="pass_sel", default="both",
                   choices=["collapsed", "expanded", "both"])
    p.add_argument("--mode", default="sofa",
                   choices=[m.value for m in OptimizerMode])
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--report", default=None)
    common(p, stats=True)
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("explain", help="emit the precedence graph as DOT")
    p.add_argument("--plan", required=True)
    p.add_argument("--pass", dest="pass_sel", default="collapsed",
                   choices=["collapsed", "expanded"])
    common(p)
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("run", help="execute a dataflow over JSON-Lines data")
    p.add_argument("--plan", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--strict", action="store_true")
    p.add_argument("-o", "--output", default=None)
    common(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("stats", help="sample statistics by running the interpreter")
    p.add_argument("--plan", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("-o", "--output", required=True)
    common(p)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("compare", help="compare optimizer modes")
    p.add_argument("--plan", required=True)
    p.add_argument("--modes", default="sofa,rw,filterpush,siso")
    p.add_argument("--data", default=None, help="JSON-Lines dataset directory")
    p.add_argument("--corpus", default=None, help="corpus config JSON file")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("-o", "--output", default=None)
    common(p, stats=True)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("check-equiv", help="equivalence-check two plans")
    p.add_argument("--plan", action="append", required=True)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=1000)
    p.add_argument("--corpus", default=None)
    common(p)
    p.set_defaults(fn=cmd_check_equiv)

    p = sub.add_parser("rules", help="explain a reorder derivation")
    p.add_argument("action", choices=["why"])
    p.add_argument("x")
    p.add_argument("y")
    p.add_argument("--plan", required=True)
    common(p)
    p.set_defaults(fn=cmd_rules_why)

    p = sub.add_parser("fixtures", help="list or export shipped fixtures")
    p.add_argument("action", choices=["list", "export"])
    p.add_argument("name", nargs="?")
    p.add_argument("--level", type=int, default=None)
    p.add_argument("--seed", type=int, default=11)
    p.add_argument("-o", "--output", default=None)
    p.set_defaults(fn=cmd_fixtures)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (PackageError, OptimizeError) as exc:
        _err(str(exc))
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        _err(str(exc))
        return EXIT_MISSING_STATS if "stats" in str(exc) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
