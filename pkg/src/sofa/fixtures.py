"""Curated test assets: example dataflows, statistics, corpus configs."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from importlib import resources
from typing import Optional

from .cost import StatsBundle
from .dataflow import Dataflow
from .datamodel import Dataset, Record
from .interpreter import generate_corpus
from .presto import Taxonomy, standard_taxonomy


class FixtureError(KeyError):
    pass


@dataclass
class Fixture:
    name: str
    manifest: dict
    dataflow: Dataflow
    stats: StatsBundle
    taxonomy: Taxonomy
    extra_sources: tuple[str, ...] = ()

    @property
    def corpus_config(self) -> Optional[dict]:
        return self.manifest.get("corpus")

    def sources(self, seed: int = 11) -> dict[str, Dataset]:
        """Bound source datasets for the fixture (synthetic, deterministic)."""
        rel = self.manifest.get("relational")
        if rel is not None:
            return _relational_sources(rel, seed)
        cfg = self.corpus_config or {"docs": 60}
        return {
            (n.ref or n.id): generate_corpus(cfg, seed + 13 * i)
            for i, n in enumerate(self.dataflow.sources())
        }


def _relational_sources(rel: dict, seed: int) -> dict[str, Dataset]:
    rng = random.Random(seed)
    li = rel.get("lineitem", {})
    sp = rel.get("supplier", {})
    n_supp = sp.get("rows", 40)
    suppliers = [
        {"suppkey": k, "sname": f"supplier-{k:03d}"} for k in range(n_supp)
    ]
    y0, y1 = li.get("year_range", [1992, 1998])
    items = []
    for i in range(li.get("rows", 260)):
        items.append({
            "suppkey": rng.randrange(li.get("suppkeys", n_supp)),
            "qty": rng.randint(1, 50),
            "shipyear": rng.randint(y0, y1),
            "price": rng.randint(10, 500),
        })
    return {
        "lineitem": Dataset(Record(r) for r in items),
        "supplier": Dataset(Record(r) for r in suppliers),
    }


def fixture_names() -> list[str]:
    files = resources.files("sofa.fixtures_data")
    return sorted(p.name for p in files.iterdir() if p.is_dir())


def _alias_map() -> dict[str, str]:
    out = {}
    for name in fixture_names():
        doc = json.loads(
            resources.files("sofa.fixtures_data").joinpath(name)
            .joinpath("manifest.json").read_text("utf-8"))
        out[name] = name
        for alias in doc.get("aliases", ()):
            out[alias] = name
    return out


def load_fixture(name: str, level: Optional[int] = None,
                 taxonomy: Optional[Taxonomy] = None) -> Fixture:
    """Materialize a fixture by name or alias. ``level`` selects a
    pay-as-you-go annotation level for fixtures that define them."""
    aliases = _alias_map()
    if name not in aliases:
        raise FixtureError(f"unknown fixture {name!r}; have {sorted(set(aliases))}")
    name = aliases[name]
    root = resources.files("sofa.fixtures_data").joinpath(name)
    manifest = json.loads(root.joinpath("manifest.json").read_text("utf-8"))
    flow = Dataflow.from_json(root.joinpath(manifest["flow"]).read_text("utf-8"))
    stats = StatsBundle.from_json(root.joinpath(manifest["stats"]).read_text("utf-8"))
    extra: tuple[str, ...] = ()
    levels = manifest.get("levels")
    if levels:
        idx = 0 if level is None else level
        if not 0 <= idx < len(levels):
            raise FixtureError(f"fixture {name!r} has levels 0..{len(levels) - 1}")
        extra = tuple(
            root.joinpath(fname).read_text("utf-8") for fname in levels[idx])
    elif level is not None:
        raise FixtureError(f"fixture {name!r} has no annotation levels")
    if taxonomy is None:
        taxonomy = standard_taxonomy(
            packages=manifest.get("packages", ("base", "ie", "dc", "web")),
            extra_sources=extra)
    return Fixture(name=name, manifest=manifest, dataflow=flow, stats=stats,
                   taxonomy=taxonomy, extra_sources=extra)
