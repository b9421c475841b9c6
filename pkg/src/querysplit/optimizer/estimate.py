"""Selectivity and cardinality estimation under the independence assumption."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from ..catalog import INT64, StoredRelation
from ..query import ColumnRef, Predicate, RANGE_OPS
from ..stats import ColumnStats, TableStats, frequency, range_fraction

log = logging.getLogger(__name__)

DEFAULT_SEL = 0.01
DEFAULT_RANGE_SEL = 1.0 / 3.0


@dataclass
class BoundRelation:
    """A relation as the optimizer sees it: rows, qualified columns, statistics."""

    name: str
    stored: StoredRelation
    columns: tuple[str, ...]
    stats: TableStats | None
    base: str | None = None
    indexed: frozenset[str] = frozenset()

    @property
    def kind(self) -> str:
        return self.stored.kind

    @property
    def row_count(self) -> int:
        return len(self.stored.rows)

    def column_index(self, name: str) -> int:
        return self.columns.index(name)

    def column_type(self, name: str) -> str:
        return self.stored.types[self.columns.index(name)]

    def presorted_on(self, name: str) -> bool:
        if self.base is None or not self.stored.pk_sorted:
            return False
        pk = self.stored.defn.primary_key
        return pk is not None and name == f"{self.name}.{pk}"


@dataclass
class EstimationContext:
    """Statistics visible to the estimator: one entry per bound relation."""

    relations: dict[str, BoundRelation] = field(default_factory=dict)

    def column_stats(self, c: ColumnRef) -> ColumnStats | None:
        b = self.relations.get(c.rel)
        if b is None or b.stats is None:
            return None
        return b.stats.columns.get(c.name)

    def row_count(self, rel: str) -> int:
        """Row count as recorded in the statistics (the stored size when none exist)."""
        b = self.relations[rel]
        return b.stats.row_count if b.stats is not None else b.row_count


def eq_join_selectivity(a: ColumnStats, b: ColumnStats) -> float:
    """Selectivity of ``a = b`` from MCV overlap plus a uniform remainder.

    MCV values present on both sides contribute ``f_a(v) * f_b(v)``; an MCV
    value of one side is assumed to appear among the other side's non-MCV
    values at the uniform remainder frequency; the leftover non-MCV values
    are assumed to overlap as much as possible.  The result is floored at
    ``1 / max(n_distinct)``.
    """
    ua = a.remainder_frequency
    ub = b.remainder_frequency
    ma = dict(a.mcv)
    mb = dict(b.mcv)
    sel = 0.0
    only_a = only_b = 0
    for v, fa in ma.items():
        fb = mb.get(v)
        if fb is None:
            sel += fa * ub
            only_a += 1
        else:
            sel += fa * fb
    for v, fb in mb.items():
        if v not in ma:
            sel += fb * ua
            only_b += 1
    rest_a = a.n_distinct - len(ma) - only_b
    rest_b = b.n_distinct - len(mb) - only_a
    if rest_a > 0 and rest_b > 0:
        sel += min(rest_a, rest_b) * ua * ub
    floor = 1.0 / max(a.n_distinct, b.n_distinct, 1)
    return min(1.0, max(sel, floor))


def selectivity(pred: Predicate, ctx: EstimationContext) -> float:
    a = ctx.column_stats(pred.left)
    if a is None:
        log.debug("no statistics for %s, using default selectivity", pred.left)
        return DEFAULT_SEL
    if not pred.is_colcol:
        c = pred.right
        if pred.op == "=":
            return frequency(a, c)
        if pred.op == "<>":
            return 1.0 - frequency(a, c)
        if a.datatype == INT64 and isinstance(c, int):
            return range_fraction(a, pred.op, c)
        return DEFAULT_RANGE_SEL
    b = ctx.column_stats(pred.right)
    if b is None:
        log.debug("no statistics for %s, using default selectivity", pred.right)
        return DEFAULT_SEL
    if pred.op == "=":
        return eq_join_selectivity(a, b)
    if pred.op == "<>":
        return 1.0 - eq_join_selectivity(a, b)
    return DEFAULT_RANGE_SEL


def conjunction_selectivity(preds, ctx: EstimationContext) -> float:
    s = 1.0
    for p in preds:
        s *= selectivity(p, ctx)
    return s


def estimate_join_card(left_rows: float, right_rows: float, preds, ctx: EstimationContext) -> float:
    return left_rows * right_rows * conjunction_selectivity(preds, ctx)
