"""In-memory SPJ engine with query splitting and baseline optimizers."""

from .catalog import (
    AttributeDef,
    Catalog,
    ForeignKey,
    MemoryBudget,
    RelationDef,
    StoredRelation,
    TempSpace,
    define_schema,
    load_dataset,
    materialize,
)
from .errors import MemoryExceeded, QuerySplitError
from .executor import DirectMap, execute, materialize_with_pushdown
from .optimizer import CostParams, Planner, PlanNode, calibrate
from .pipeline import Session, replac, run, run_optimal, run_query_split, run_reopt, run_static
from .query import ColumnRef, Predicate, SPJQuery, Subquery, covers, join_graph, normalize, parse, parse_query
from .splitter import classify, entity_center, min_subquery, relationship_center, split
from .stats import analyze, collect_runtime_stats, frequency

__version__ = "0.1.0"

__all__ = [
    "AttributeDef", "Catalog", "ForeignKey", "MemoryBudget", "RelationDef", "StoredRelation", "TempSpace",
    "define_schema", "load_dataset", "materialize", "MemoryExceeded", "QuerySplitError",
    "DirectMap", "execute", "materialize_with_pushdown", "CostParams", "Planner", "PlanNode", "calibrate",
    "Session", "replac", "run", "run_optimal", "run_query_split", "run_reopt", "run_static",
    "ColumnRef", "Predicate", "SPJQuery", "Subquery", "covers", "join_graph", "normalize", "parse", "parse_query",
    "classify", "entity_center", "min_subquery", "relationship_center", "split",
    "analyze", "collect_runtime_stats", "frequency",
]
