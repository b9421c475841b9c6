"""Cost model and least-squares calibration of its five parameters.

Every formula is linear in the parameters, which is what makes
:func:`calibrate` a plain least-squares problem.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from ..errors import SingularSystem

PAGE_ROWS = 100


@dataclass(frozen=True)
class CostParams:
    seq_page_cost: float = 3.0
    random_page_cost: float = 3.0
    cpu_tuple_cost: float = 0.07
    cpu_index_cost: float = 0.07
    cpu_operator_cost: float = 0.02

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")

    def as_vector(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_vector(cls, v) -> "CostParams":
        return cls(*(float(x) for x in v))

    @classmethod
    def unit(cls, i: int) -> "CostParams":
        v = [0.0] * 5
        v[i] = 1.0
        return cls(*v)


PARAM_NAMES = tuple(f.name for f in fields(CostParams))


def pages(rows: float) -> int:
    return math.ceil(rows / PAGE_ROWS) if rows > 0 else 0


def seqscan_cost(rows: float, n_filters: int, p: CostParams) -> float:
    return (
        pages(rows) * p.seq_page_cost
        + rows * p.cpu_tuple_cost
        + rows * n_filters * p.cpu_operator_cost
    )


def indexscan_cost(matches: float, n_residual: int, p: CostParams) -> float:
    return (
        p.random_page_cost
        + matches * (p.cpu_index_cost + p.cpu_tuple_cost)
        + matches * n_residual * p.cpu_operator_cost
    )


def nestloop_cost(outer_rows, inner_rows, out_rows, p: CostParams) -> float:
    """Own cost of a nested loop: the inner input is buffered once and rescanned per outer row."""
    rescan = inner_rows * p.cpu_operator_cost
    return outer_rows * rescan + out_rows * p.cpu_tuple_cost


def hashjoin_cost(outer_rows, inner_rows, out_rows, p: CostParams) -> float:
    return (
        (inner_rows + outer_rows) * p.cpu_operator_cost
        + inner_rows * p.cpu_tuple_cost
        + out_rows * p.cpu_tuple_cost
    )


def sort_cost(rows: float, p: CostParams) -> float:
    if rows <= 1:
        return 0.0
    return rows * math.log2(rows) * p.cpu_operator_cost


def mergejoin_cost(outer_rows, inner_rows, out_rows, outer_sorted, inner_sorted, p: CostParams) -> float:
    c = out_rows * p.cpu_tuple_cost
    if not outer_sorted:
        c += sort_cost(outer_rows, p)
    if not inner_sorted:
        c += sort_cost(inner_rows, p)
    return c


def directmap_cost(outer_rows, inner_rows, out_rows, p: CostParams) -> float:
    return hashjoin_cost(outer_rows, inner_rows, out_rows, p) / 2


def project_cost(rows, p: CostParams) -> float:
    return rows * p.cpu_operator_cost


def materialize_cost(rows, p: CostParams) -> float:
    return rows * p.cpu_tuple_cost


def operator_cost(kind: str, p: CostParams, *, rows=0.0, n_filters=0, outer_rows=0.0,
                  inner_rows=0.0, out_rows=0.0, outer_sorted=False, inner_sorted=False) -> float:
    """Own (non-cumulative) cost of one plan operator."""
    if kind == "SeqScan":
        return seqscan_cost(rows, n_filters, p)
    if kind == "IndexScan":
        return indexscan_cost(rows, n_filters, p)
    if kind == "NestedLoopJoin":
        return nestloop_cost(outer_rows, inner_rows, out_rows, p)
    if kind == "HashJoin":
        return hashjoin_cost(outer_rows, inner_rows, out_rows, p)
    if kind == "MergeJoin":
        return mergejoin_cost(outer_rows, inner_rows, out_rows, outer_sorted, inner_sorted, p)
    if kind == "DirectmapJoin":
        return directmap_cost(outer_rows, inner_rows, out_rows, p)
    if kind == "Project":
        return project_cost(rows, p)
    if kind == "Materialize":
        return materialize_cost(rows, p)
    raise ValueError(f"unknown operator {kind!r}")


def cost(kind: str, child_costs=(), p: CostParams = CostParams(), **inputs) -> float:
    """Cumulative cost: children plus the operator's own cost."""
    return sum(child_costs) + operator_cost(kind, p, **inputs)


def plan_cost(plan, p: CostParams, use_true_rows: bool = False) -> float:
    """Re-cost an existing plan tree under ``p``.

    With ``use_true_rows`` every cardinality is taken from the node's
    recorded true row count (scans keep their stored relation size).
    """
    def rows_of(n):
        if use_true_rows and n.true_rows is not None:
            return n.true_rows
        return n.est_rows

    def walk(n) -> float:
        kids = [walk(c) for c in n.children]
        if n.kind == "SeqScan":
            own = seqscan_cost(n.base_rows, len(n.filters), p)
        elif n.kind == "IndexScan":
            if use_true_rows and n.true_matches is not None:
                matches = n.true_matches
            else:
                matches = n.index_matches
            own = indexscan_cost(matches, max(0, len(n.filters) - 1), p)
        elif n.kind in ("Project", "Materialize"):
            own = operator_cost(n.kind, p, rows=rows_of(n.children[0]))
        else:
            o, i = n.children
            own = operator_cost(
                n.kind, p, outer_rows=rows_of(o), inner_rows=rows_of(i), out_rows=rows_of(n),
                outer_sorted=n.presorted[0], inner_sorted=n.presorted[1],
            )
        return sum(kids) + own

    return walk(plan)


def cost_coefficients(plan, use_true_rows: bool = True) -> np.ndarray:
    """Row of the design matrix: the plan's cost under each unit parameter vector."""
    return np.array([plan_cost(plan, CostParams.unit(i), use_true_rows) for i in range(5)])


def calibrate(measurements, use_true_rows: bool = True) -> CostParams:
    """Fit cost parameters to observed latencies by ordinary least squares.

    ``measurements`` is a sequence of ``(plan, latency)`` pairs.  The normal
    equations are solved on column-scaled coefficients; negative estimates
    are clamped to zero.
    """
    measurements = list(measurements)
    if not measurements:
        raise SingularSystem("no measurements")
    A = np.vstack([cost_coefficients(plan, use_true_rows) for plan, _ in measurements])
    y = np.array([float(lat) for _, lat in measurements])
    scale = np.abs(A).max(axis=0)
    if np.any(scale == 0):
        missing = [PARAM_NAMES[i] for i in np.flatnonzero(scale == 0)]
        raise SingularSystem(f"measurements carry no information about {missing}")
    As = A / scale
    gram = As.T @ As
    if len(measurements) < 5 or np.linalg.matrix_rank(gram) < 5:
        raise SingularSystem(
            f"design matrix has rank {np.linalg.matrix_rank(As)} < 5 "
            f"({len(measurements)} measurements)"
        )
    sol = np.linalg.solve(gram, As.T @ y) / scale
    return CostParams.from_vector(np.clip(sol, 0.0, None))
