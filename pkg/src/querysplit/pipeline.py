"""Query-split driver and the static, reoptimizing and optimal-plan baselines.

All four modes share a :class:`Session`: it owns the temp-table namespace
and memory budget, binds relation names to statistics, and keeps a log of
what each run did (subquery timings, boundary estimates, executed plans).
"""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field
from operator import itemgetter
from typing import Iterable, Iterator, Sequence

from .catalog import DEFAULT_TEST_BUDGET, Catalog, MemoryBudget, TempSpace
from .errors import MemoryExceeded, NoContainingSubquery
from .executor import MAX_MAP_SIZE, materialize_with_pushdown, plan_types, stream
from .optimizer.cost import CostParams, project_cost
from .optimizer.enumerate import DEFAULT_DIRECTMAP_THRESHOLD, Planner, encouragement_factor, optimal_mode_record
from .optimizer.estimate import BoundRelation, EstimationContext
from .optimizer.plan import PlanNode
from .query import ColumnRef, EqualityClosure, SPJQuery, Subquery
from .splitter import split
from .stats import collect_runtime_stats

log = logging.getLogger(__name__)

ORDERS = ("cost", "row", "row_hybrid", "hybrid_sqrt", "hybrid_log", "global")
MODES = ("static", "split", "reopt", "optimal")
OPTIMAL_CAP = 20


# -- scoring ----------------------------------------------------------------------

def rank_score(policy: str, cost: float, rows: float) -> float:
    """Score of a planned subquery under one ranking function; lower runs first."""
    if policy == "cost":
        return cost
    if policy == "row":
        return rows
    if policy == "row_hybrid":
        return cost * rows
    if policy == "hybrid_sqrt":
        return cost * math.sqrt(rows)
    if policy == "hybrid_log":
        return cost * math.log(max(rows, 2.0))
    raise ValueError(f"unknown ranking policy {policy!r}")


@dataclass
class RankedSubquery:
    subquery: Subquery
    plan: PlanNode
    score: float


def qselect_ranked(pool: Sequence[Subquery], policy: str, plans: dict[str, PlanNode],
                   temps: Iterable[str] = ()) -> RankedSubquery:
    """Argmin of the policy score.

    Ties prefer subqueries that read an existing temp table, then the
    smaller serialization.
    """
    temps = set(temps)
    best = None
    for s in pool:
        plan = plans[s.key]
        score = rank_score(policy, plan.est_cost, plan.est_rows)
        k = (score, not (s.relations & temps), s.key)
        if best is None or k < best[0]:
            best = (k, RankedSubquery(s, plan, score))
    return best[1]


def deepest_join(plan: PlanNode) -> PlanNode | None:
    """Join node farthest from the root; ties go to the smallest serialization."""
    best = None
    stack = [(plan, 0)]
    while stack:
        n, d = stack.pop()
        if n.is_join:
            k = (-d, n.serialize())
            if best is None or k < best[0]:
                best = (k, n)
        stack.extend((c, d + 1) for c in n.children)
    return None if best is None else best[1]


def qselect_global(pool: Sequence[Subquery], global_plan: PlanNode) -> Subquery:
    """Pick a subquery containing the relations of the global plan's deepest join."""
    if len(pool) == 1:
        return pool[0]
    node = deepest_join(global_plan)
    if node is None:
        raise NoContainingSubquery("the global plan has no join")
    cands = [s for s in pool if node.relations <= s.relations]
    if not cands:
        raise NoContainingSubquery(f"no subquery contains {sorted(node.relations)}")
    return min(cands, key=lambda s: s.key)


# -- rewriting --------------------------------------------------------------------

def replac(qj: Subquery, m: str, ri: Iterable[str], si: Iterable = ()) -> Subquery | None:
    """Substitute temp ``m`` for the relations ``ri`` inside ``qj``.

    Predicates wholly inside ``ri`` that the executed predicates ``si``
    already enforce are dropped; any other such predicate survives as a
    filter on ``m``.  Returns None when nothing is left to do.
    """
    ri = frozenset(ri)
    si = frozenset(si)
    closure = EqualityClosure(si)
    mapping = {r: m for r in ri}
    preds = set()
    for p in qj.predicates:
        if p.relations <= ri and (p in si or closure.implies(p)):
            continue
        preds.add(p.rebind(mapping))
    rels = (qj.relations - ri) | {m}
    if rels == {m} and not preds:
        return None
    return Subquery(rels, frozenset(preds))


# -- session ------------------------------------------------------------------------

@dataclass
class BoundaryCheck:
    temp: str
    estimated: float
    true_rows: int


@dataclass
class StepLog:
    subquery: str
    temp: str | None
    rows: int
    plan: str
    plan_seconds: float
    exec_seconds: float


@dataclass
class NodeEstimate:
    depth: int
    kind: str
    est_rows: float
    true_rows: int


@dataclass
class QueryResult:
    rows: list[tuple]
    columns: tuple[str, ...]
    mode: str
    seconds: float = 0.0
    steps: list[StepLog] = field(default_factory=list)
    boundaries: list[BoundaryCheck] = field(default_factory=list)
    estimates: list[NodeEstimate] = field(default_factory=list)
    plans: list[str] = field(default_factory=list)
    peak_bytes: int = 0
    iterations: int = 1
    converged: bool = True
    final_plan: PlanNode | None = None
    first_plan: PlanNode | None = None
    history: dict[str, int] = field(default_factory=dict)


class Session:
    """One query session: private temps, budget and logs over a shared catalog."""

    def __init__(self, catalog: Catalog, budget: MemoryBudget | int | None = None,
                 params: CostParams | None = None,
                 directmap_threshold: float = DEFAULT_DIRECTMAP_THRESHOLD,
                 max_map_size: int = MAX_MAP_SIZE, pushdown: bool = True):
        if budget is None:
            budget = MemoryBudget(DEFAULT_TEST_BUDGET)
        elif isinstance(budget, int):
            budget = MemoryBudget(budget)
        self.catalog = catalog
        self.space = TempSpace(catalog, budget)
        self.params = params or CostParams()
        self.directmap_threshold = directmap_threshold
        self.max_map_size = max_map_size
        self.pushdown = pushdown
        self._alias_cache: dict[tuple[str, str], BoundRelation] = {}
        self._counter = 0
        self.origin: dict[str, frozenset[str]] = {}
        self._sources: dict[str, str] = {}
        self._result: QueryResult | None = None

    @property
    def budget(self) -> MemoryBudget:
        return self.space.budget

    # binding

    def start(self, q: SPJQuery, mode: str) -> QueryResult:
        self._sources = q.source_map
        self.origin = {r: frozenset((r,)) for r in q.relations}
        self._result = QueryResult([], tuple(c.name for c in q.projection), mode)
        self._taken = set(q.relations)
        self.budget.peak_bytes = self.budget.used_bytes
        return self._result

    def bind(self, name: str) -> BoundRelation:
        if name in self.space.temps:
            stored = self.space.temps[name]
            stats = self.space.runtime_stats.get(name)
            return BoundRelation(name, stored, stored.columns, stats, None, frozenset())
        base = self._sources[name]
        key = (name, base)
        b = self._alias_cache.get(key)
        if b is None:
            stored = self.catalog[base]
            cols = tuple(f"{name}.{c}" for c in stored.columns)
            stats = self.catalog.stats(base).renamed(dict(zip(stored.columns, cols)))
            indexed = frozenset(f"{name}.{c}" for c in self.catalog.indexed_columns(base))
            b = self._alias_cache[key] = BoundRelation(name, stored, cols, stats, base, indexed)
        return b

    def context(self, names: Iterable[str]) -> EstimationContext:
        return EstimationContext({n: self.bind(n) for n in names})

    def planner(self, sub: Subquery, **kw) -> Planner:
        return Planner(sub, self.context(sub.relations), self.params,
                       directmap_threshold=self.directmap_threshold, max_map_size=self.max_map_size, **kw)

    def new_temp(self) -> str:
        while True:
            self._counter += 1
            name = f"m{self._counter}"
            if name not in self.catalog and name not in self._taken and name not in self.space.temps:
                self._taken.add(name)
                return name

    # execution helpers

    def run_plan(self, plan: PlanNode, names: Iterable[str]) -> Iterator[tuple]:
        bindings = {n: self.bind(n) for n in names}
        return stream(plan, bindings, self.catalog, self.space, self.max_map_size)

    def depth(self, node: PlanNode) -> int:
        return sum(len(self.origin.get(r, (r,))) for r in node.relations) - 1

    def record_estimates(self, plan: PlanNode) -> None:
        for n in plan.walk():
            if n.is_join and n.true_rows is not None:
                self._result.estimates.append(NodeEstimate(self.depth(n), n.kind, n.est_rows, n.true_rows))

    def materialize(self, m: str, plan: PlanNode, names, rows: Iterable[tuple], needed: set[str]) -> None:
        """Store ``rows`` (laid out as ``plan``) as temp ``m``, analyze it, check the boundary."""
        types = plan_types(plan, {n: self.bind(n) for n in names})
        keep = needed if self.pushdown else set(plan.columns)
        stored = materialize_with_pushdown(rows, plan.columns, types, keep, m, self.space)
        collect_runtime_stats(stored, self.space)
        self.origin[m] = frozenset().union(*(self.origin.get(r, frozenset((r,))) for r in plan.relations))
        est = self.planner(Subquery(frozenset((m,)))).est(1)
        self._result.boundaries.append(BoundaryCheck(m, est, len(stored.rows)))

    def drop(self, names: Iterable[str]) -> None:
        for n in names:
            if n in self.space.temps:
                self.space.drop_materialized(n)

    def finish(self, t0: float) -> QueryResult:
        r = self._result
        r.seconds = time.perf_counter() - t0
        r.peak_bytes = self.budget.peak_bytes
        self._result = None
        return r

    def cleanup(self) -> None:
        self.space.drop_all()


def _with_project(plan: PlanNode, projection: Sequence[ColumnRef], p: CostParams) -> PlanNode:
    cost = plan.est_cost + project_cost(plan.est_rows, p)
    return PlanNode("Project", children=(plan,), est_rows=plan.est_rows, est_cost=cost,
                    own_cost=cost - plan.est_cost, relations=plan.relations,
                    columns=tuple(c.name for c in projection), output=tuple(projection), mask=plan.mask)


def _needed(name_holders: Iterable[str], subqueries: Iterable[Subquery], projection: Sequence[ColumnRef]) -> set[str]:
    holders = set(name_holders)
    need = {c.name for c in projection if c.rel in holders}
    for s in subqueries:
        for p in s.predicates:
            for c in p.columns:
                if c.rel in holders:
                    need.add(c.name)
    return need


def _rebind_projection(projection, mapping) -> tuple[ColumnRef, ...]:
    return tuple(ColumnRef(mapping.get(c.rel, c.rel), c.name) for c in projection)


def _merge(session: Session, parts: list[tuple[Sequence[str], Iterable[tuple]]],
           projection: Sequence[ColumnRef]) -> list[tuple]:
    """Cartesian product of the parts followed by the final projection (bag semantics)."""
    layout = {}
    for cols, _ in parts:
        for c in cols:
            layout[c] = len(layout)
    pos = [layout[c.name] for c in projection]
    if len(parts) == 1:
        rows = parts[0][1]
    else:
        lists = [list(r) for _, r in parts]
        rows = (sum(combo, ()) for combo in itertools.product(*lists))
    if not pos:
        return [() for _ in rows]
    if len(pos) == 1:
        k = pos[0]
        return [(r[k],) for r in rows]
    g = itemgetter(*pos)
    return [g(r) for r in rows]


# -- query split ----------------------------------------------------------------------

def run_query_split(q: SPJQuery, session: Session, split_method: str = "relcenter",
                    order: str = "hybrid_sqrt", subqueries: Sequence[Subquery] | None = None) -> QueryResult:
    """Execute ``q`` by splitting it, running subqueries one at a time and merging leftovers."""
    if order not in ORDERS:
        raise ValueError(f"unknown order {order!r}; expected one of {ORDERS}")
    t0 = time.perf_counter()
    result = session.start(q, "split")
    try:
        pool = list(subqueries) if subqueries is not None else split(q, session.catalog, split_method)
        projection = q.projection
        leftovers: list[str] = []
        plans: dict[str, PlanNode] = {}
        global_q = Subquery(q.relations, frozenset().union(*(s.predicates for s in pool)))
        while pool:
            tp = time.perf_counter()
            for s in pool:
                if s.key not in plans:
                    plans[s.key] = session.planner(s).plan()
            chosen = None
            if order == "global":
                try:
                    gplan = session.planner(global_q).plan()
                    chosen = qselect_global(pool, gplan)
                except NoContainingSubquery as e:
                    log.info("global order falls back to hybrid_sqrt: %s", e)
            if chosen is None:
                chosen = qselect_ranked(pool, "hybrid_sqrt" if order == "global" else order,
                                        plans, session.space.temps).subquery
            plan = plans.pop(chosen.key)
            pool.remove(chosen)
            names = chosen.relations
            plan_s = time.perf_counter() - tp
            te = time.perf_counter()
            m = session.new_temp()
            rest = []
            for s in pool:
                if s.relations & names:
                    r = replac(s, m, names, chosen.predicates)
                    if r is not None:
                        rest.append(r)
                else:
                    rest.append(s)
            if not rest:
                # nothing left to plan against this result: stream it straight into the merge
                parts = [(session.space.temps[x].columns, session.space.temps[x].rows) for x in leftovers]
                parts.append((plan.columns, session.run_plan(plan, names)))
                result.rows = _merge(session, parts, projection)
                session.record_estimates(plan)
                result.steps.append(StepLog(chosen.key, None, plan.true_rows or 0, plan.serialize(),
                                            plan_s, time.perf_counter() - te))
                result.plans.append(plan.serialize())
                break
            if order == "global":
                global_q = replac(global_q, m, names, chosen.predicates) or Subquery(frozenset((m,)))
            extra = [global_q] if order == "global" else []
            mapping = {r: m for r in names}
            new_projection = _rebind_projection(projection, mapping)
            need = _needed((m,), rest + extra, new_projection)
            rows = session.run_plan(plan, names)
            session.materialize(m, plan, names, rows, need)
            session.record_estimates(plan)
            result.steps.append(StepLog(chosen.key, m, plan.true_rows or 0, plan.serialize(),
                                        plan_s, time.perf_counter() - te))
            result.plans.append(plan.serialize())
            session.drop(n for n in names if n in session.space.temps)
            projection = new_projection
            pool = rest
            if not any(m in s.relations for s in pool):
                leftovers.append(m)
        return session.finish(t0)
    finally:
        session.cleanup()


# -- baselines -----------------------------------------------------------------------

def run_static(q: SPJQuery, session: Session) -> QueryResult:
    """Plan the whole query once with static statistics and execute it."""
    t0 = time.perf_counter()
    result = session.start(q, "static")
    try:
        tp = time.perf_counter()
        plan = _with_project(session.planner(q.as_subquery()).plan(), q.projection, session.params)
        plan_s = time.perf_counter() - tp
        te = time.perf_counter()
        result.rows = list(session.run_plan(plan, q.relations))
        session.record_estimates(plan)
        result.steps.append(StepLog(q.as_subquery().key, None, len(result.rows), plan.serialize(),
                                    plan_s, time.perf_counter() - te))
        result.plans.append(plan.serialize())
        result.final_plan = plan
        return session.finish(t0)
    finally:
        session.cleanup()


def run_reopt(q: SPJQuery, session: Session) -> QueryResult:
    """Execute the deepest join, materialize it, rewrite the remainder and replan."""
    t0 = time.perf_counter()
    result = session.start(q, "reopt")
    try:
        current = q.as_subquery()
        projection = q.projection
        while True:
            tp = time.perf_counter()
            plan = session.planner(current).plan()
            plan_s = time.perf_counter() - tp
            node = deepest_join(plan)
            te = time.perf_counter()
            if node is None or node is plan:
                final = _with_project(plan, projection, session.params)
                result.rows = list(session.run_plan(final, current.relations))
                session.record_estimates(final)
                result.steps.append(StepLog(current.key, None, len(result.rows), final.serialize(),
                                            plan_s, time.perf_counter() - te))
                result.plans.append(final.serialize())
                result.final_plan = final
                break
            names = node.relations
            done = frozenset(p for p in current.predicates if p.relations <= names)
            m = session.new_temp()
            nxt = replac(current, m, names, done)
            new_projection = _rebind_projection(projection, {r: m for r in names})
            need = _needed((m,), [nxt] if nxt is not None else [], new_projection)
            session.materialize(m, node, names, session.run_plan(node, names), need)
            session.record_estimates(node)
            result.steps.append(StepLog(Subquery(names, done).key, m, node.true_rows or 0, node.serialize(),
                                        plan_s, time.perf_counter() - te))
            result.plans.append(node.serialize())
            session.drop(n for n in names if n in session.space.temps)
            projection = new_projection
            current = nxt if nxt is not None else Subquery(frozenset((m,)))
        return session.finish(t0)
    finally:
        session.cleanup()


def run_optimal(q: SPJQuery, session: Session, factor: float | None = None,
                cap: int = OPTIMAL_CAP, history: dict[str, int] | None = None) -> QueryResult:
    """Iterate plan, execute, record true cardinalities until the plan stops changing."""
    t0 = time.perf_counter()
    if factor is None:
        factor = encouragement_factor(len(q.relations))
    history = {} if history is None else history
    result = session.start(q, "optimal")
    try:
        previous = None
        result.converged = False
        for it in range(1, cap + 1):
            result.estimates.clear()
            tp = time.perf_counter()
            planner = session.planner(q.as_subquery(), history=history, factor=factor)
            plan = _with_project(planner.plan(), q.projection, session.params)
            plan_s = time.perf_counter() - tp
            te = time.perf_counter()
            result.rows = list(session.run_plan(plan, q.relations))
            session.record_estimates(plan)
            for n in plan.walk():
                if n.kind != "Project" and n.true_rows is not None:
                    optimal_mode_record(planner.bitmap(n.mask), n.true_rows, history)
            ser = plan.serialize()
            result.steps.append(StepLog(f"iteration {it}", None, len(result.rows), ser,
                                        plan_s, time.perf_counter() - te))
            result.plans.append(ser)
            result.iterations = it
            result.final_plan = plan
            if it == 1:
                result.first_plan = plan
            if ser == previous:
                result.converged = True
                break
            previous = ser
        result.history = dict(history)
        return session.finish(t0)
    finally:
        session.cleanup()


def run(q: SPJQuery, session: Session, mode: str = "split", split_method: str = "relcenter",
        order: str = "hybrid_sqrt", **kw) -> QueryResult:
    if mode == "split":
        return run_query_split(q, session, split_method, order)
    if mode == "static":
        return run_static(q, session)
    if mode == "reopt":
        return run_reopt(q, session)
    if mode == "optimal":
        return run_optimal(q, session, **kw)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


def execute_fixed(plan: PlanNode, q: SPJQuery, session: Session) -> tuple[list[tuple], float]:
    """Re-run an already chosen plan over the base relations; returns rows and seconds."""
    session.start(q, "fixed")
    t0 = time.perf_counter()
    try:
        rows = list(session.run_plan(plan, q.relations))
        return rows, time.perf_counter() - t0
    finally:
        session._result = None
        session.cleanup()


__all__ = [
    "ORDERS", "MODES", "rank_score", "RankedSubquery", "qselect_ranked", "qselect_global", "deepest_join",
    "replac", "Session", "QueryResult", "BoundaryCheck", "StepLog", "NodeEstimate",
    "run_query_split", "run_static", "run_reopt", "run_optimal", "run", "execute_fixed", "MemoryExceeded",
]
