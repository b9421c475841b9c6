"""Cardinality estimation, cost model and plan enumeration."""

from .cost import PARAM_NAMES, CostParams, calibrate, cost, cost_coefficients, operator_cost, plan_cost
from .enumerate import (
    DEFAULT_DIRECTMAP_THRESHOLD,
    Planner,
    directmap_admissible,
    encouragement_factor,
    optimal_mode_record,
    plan_subquery,
)
from .estimate import (
    DEFAULT_SEL,
    BoundRelation,
    EstimationContext,
    conjunction_selectivity,
    eq_join_selectivity,
    estimate_join_card,
    selectivity,
)
from .plan import JOIN_KINDS, SCAN_KINDS, PlanNode

__all__ = [
    "PARAM_NAMES", "CostParams", "calibrate", "cost", "cost_coefficients", "operator_cost", "plan_cost",
    "DEFAULT_DIRECTMAP_THRESHOLD", "Planner", "directmap_admissible", "encouragement_factor",
    "optimal_mode_record", "plan_subquery",
    "DEFAULT_SEL", "BoundRelation", "EstimationContext", "conjunction_selectivity",
    "eq_join_selectivity", "estimate_join_card", "selectivity",
    "JOIN_KINDS", "SCAN_KINDS", "PlanNode",
]
