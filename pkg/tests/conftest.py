import pytest

from sofa.enumerator import EnumerationConfig, optimize
from sofa.fixtures import load_fixture
from sofa.presto import standard_taxonomy

FIXTURE_NAMES = [
    "parallel-annotate-merge",
    "news-relations",
    "term-frequency",
    "supplier-revenue",
    "person-extraction",
    "markup-payg",
]


@pytest.fixture(scope="session")
def taxonomy():
    return standard_taxonomy()


@pytest.fixture(scope="session")
def fixture_cache(taxonomy):
    cache = {}

    def get(name, level=None):
        key = (name, level)
        if key not in cache:
            if level is None and name in FIXTURE_NAMES and name != "markup-payg":
                cache[key] = load_fixture(name, taxonomy=taxonomy)
            else:
                cache[key] = load_fixture(name, level=level)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def space_cache(fixture_cache):
    """Unpruned and pruned optimize results, computed once per fixture."""
    cache = {}

    def get(name, prune=False, level=None):
        key = (name, prune, level)
        if key not in cache:
            fx = fixture_cache(name, level)
            cache[key] = (fx, optimize(fx.dataflow, fx.taxonomy, fx.stats,
                                       EnumerationConfig(prune=prune)))
        return cache[key]

    return get
