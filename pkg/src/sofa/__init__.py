"""SOFA: a semantics-aware logical optimizer for UDF-heavy DAG-shaped
dataflows, with a taxonomy-driven rule engine, cost-based plan enumeration
and a built-in interpreter for equivalence checking."""

from .datamodel import (
    AttributePath,
    Dataset,
    Record,
    SchemaDescriptor,
    bag_equal,
    read_path,
    schema_contains,
    write_path,
)
from .dataflow import Dataflow, Edge, Node, propagate_schemas, topological_order, validate
from .presto import Taxonomy, standard_taxonomy
from .rewrite import QueryFacts, RuleSession, evaluate_static_rules, match_structural
from .precedence import PrecedenceGraph, build_precedence, transitive_closure
from .cost import CostWeights, OperatorStats, StatsBundle, operator_cost, plan_cost, propagate_cardinalities, sample_stats
from .enumerator import EnumerationConfig, PlanAlternative, enumerate_plans, optimize, rank
from .interpreter import check_equivalence, generate_corpus, run
from .baselines import OptimizerMode, compare_modes, enumerate_mode
from .fixtures import Fixture, fixture_names, load_fixture

__version__ = "0.1.0"
