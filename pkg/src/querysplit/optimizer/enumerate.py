"""Join-order enumeration: bushy dynamic programming with a greedy fallback.

A :class:`Planner` is built for one subquery against one estimation
context.  Cardinalities depend only on the set of joined relations, so the
best plan per relation set is sufficient and the dynamic program is exact
under its own cost model.
"""

from __future__ import annotations

from typing import Callable, Mapping

from ..catalog import INT64
from ..query import ColumnRef, EqualityClosure, Predicate, Subquery, make_predicate
from .cost import CostParams, directmap_cost, hashjoin_cost, indexscan_cost, mergejoin_cost, nestloop_cost, seqscan_cost
from .estimate import DEFAULT_SEL, EstimationContext, eq_join_selectivity, selectivity
from .plan import PlanNode

DP_LIMIT = 10
DEFAULT_DIRECTMAP_THRESHOLD = 0.05
MAX_MAP_SIZE = 1 << 24
DEFAULT_FACTOR = 0.1
HUGE_FACTOR = 0.5
HUGE_QUERY = 8


def encouragement_factor(n_relations: int) -> float:
    return HUGE_FACTOR if n_relations >= HUGE_QUERY else DEFAULT_FACTOR


def popcount(x: int) -> int:
    return bin(x).count("1")


def optimal_mode_record(bitmap: str, true_card: int, history: dict[str, int]) -> dict[str, int]:
    """Insert or overwrite the true cardinality of one relation subset."""
    history[bitmap] = int(true_card)
    return history


def directmap_admissible(inner: PlanNode, ctx: EstimationContext,
                         threshold: float = DEFAULT_DIRECTMAP_THRESHOLD,
                         key: ColumnRef | None = None,
                         max_map_size: int = MAX_MAP_SIZE) -> bool:
    """Can ``inner`` be the build side of a directmap join on ``key``?"""
    if not inner.is_leaf:
        return False
    b = ctx.relations.get(inner.relation)
    if b is None or b.kind not in ("base", "materialized"):
        return False
    if key is not None:
        if b.column_type(key.name) != INT64:
            return False
        st = ctx.column_stats(key)
        if st is None or st.min_value is None or st.max_value is None:
            return False
        if st.min_value < 0 or st.max_value >= max_map_size:
            return False
    n_r = inner.base_rows
    if n_r <= 0:
        return False
    return inner.est_rows / n_r >= threshold


class Planner:
    """Cost-based optimizer for one subquery.

    ``history`` maps relation-subset bitmaps to true cardinalities and,
    together with ``factor``, turns the planner into the history-driven
    optimal-plan search.  Bit ``i`` of a bitmap (leftmost character first)
    stands for the ``i``-th relation in sorted order.
    """

    def __init__(self, sub: Subquery, ctx: EstimationContext, params: CostParams | None = None, *,
                 directmap_threshold: float = DEFAULT_DIRECTMAP_THRESHOLD,
                 max_map_size: int = MAX_MAP_SIZE,
                 history: Mapping[str, int] | None = None,
                 factor: float | None = None,
                 card_fn: Callable[[str], float | None] | None = None,
                 dp_limit: int = DP_LIMIT):
        self.sub = sub
        self.ctx = ctx
        self.params = params or CostParams()
        self.threshold = directmap_threshold
        self.max_map_size = max_map_size
        self.history = history
        self.factor = factor
        self.card_fn = card_fn
        self.dp_limit = dp_limit
        self.rels = sorted(sub.relations)
        self.n = len(self.rels)
        self.idx = {r: i for i, r in enumerate(self.rels)}
        self._est: dict[int, float] = {}
        self._corr: dict[int, float] = {}
        self._known: dict[int, float | None] = {}
        self._sel: dict[Predicate, float] = {}
        self._classify()

    # -- predicate bookkeeping ------------------------------------------------

    def _classify(self) -> None:
        n = self.n
        filters: list[list[Predicate]] = [[] for _ in range(n)]
        closure = EqualityClosure(self.sub.predicates)
        self.classes: list[dict[int, list[ColumnRef]]] = []
        for cls in closure.classes():
            by_rel: dict[int, list[ColumnRef]] = {}
            for c in cls:
                by_rel.setdefault(self.idx[c.rel], []).append(c)
            for i, cols in by_rel.items():
                cols.sort()
                # columns of one relation in one class: enforce as a chain of scan filters
                for a, b in zip(cols, cols[1:]):
                    filters[i].append(make_predicate(a, "=", b))
            if len(by_rel) > 1:
                self.classes.append(by_rel)
        self.residual: list[tuple[Predicate, int]] = []
        for p in sorted(self.sub.predicates, key=str):
            if p.is_equijoin:
                continue
            m = 0
            for r in p.relations:
                m |= 1 << self.idx[r]
            if popcount(m) == 1:
                filters[self.idx[p.left.rel]].append(p)
            else:
                self.residual.append((p, m))
        self.filters = [tuple(sorted(set(f), key=str)) for f in filters]
        adj = [0] * n
        for by_rel in self.classes:
            m = 0
            for i in by_rel:
                m |= 1 << i
            for i in by_rel:
                adj[i] |= m & ~(1 << i)
        for _, m in self.residual:
            for i in range(n):
                if m >> i & 1:
                    adj[i] |= m & ~(1 << i)
        self.adj = adj
        self.leaf_rows = []
        for i, r in enumerate(self.rels):
            rows = float(self.ctx.row_count(r))
            for p in self.filters[i]:
                rows *= self.sel(p)
            self.leaf_rows.append(rows)
        self.empty = {i for i, r in enumerate(self.rels) if self.ctx.row_count(r) == 0}

    def sel(self, p: Predicate) -> float:
        s = self._sel.get(p)
        if s is None:
            s = self._sel[p] = selectivity(p, self.ctx)
        return s

    def bitmap(self, mask: int) -> str:
        return "".join("1" if mask >> i & 1 else "0" for i in range(self.n))

    def mask_of(self, relations) -> int:
        m = 0
        for r in relations:
            m |= 1 << self.idx[r]
        return m

    # -- cardinality ------------------------------------------------------------

    def raw_est(self, mask: int) -> float:
        """Independence-based estimate for the join of the relations in ``mask``."""
        rows = 1.0
        for i in range(self.n):
            if mask >> i & 1:
                rows *= self.leaf_rows[i]
        for by_rel in self.classes:
            reps = [by_rel[i][0] for i in by_rel if mask >> i & 1]
            if len(reps) < 2:
                continue
            stats = [self.ctx.column_stats(c) for c in reps]
            if any(s is None for s in stats):
                rows *= DEFAULT_SEL ** (len(reps) - 1)
                continue
            chain = sorted(zip(stats, reps), key=lambda sc: (sc[0].n_distinct, sc[1]))
            for (sa, _), (sb, _) in zip(chain, chain[1:]):
                rows *= eq_join_selectivity(sa, sb)
        for p, m in self.residual:
            if m & mask == m:
                rows *= self.sel(p)
        return rows

    def known(self, mask: int) -> float | None:
        """True cardinality from the oracle or the history list, when recorded."""
        if mask in self._known:
            return self._known[mask]
        k = None
        if self.card_fn is not None:
            k = self.card_fn(self.bitmap(mask))
        if k is None and self.history is not None:
            k = self.history.get(self.bitmap(mask))
        k = self._known[mask] = None if k is None else float(k)
        return k

    def corrected(self, mask: int) -> float:
        """Estimate anchored on the largest recorded proper subset.

        The remainder is estimated recursively and the two parts are glued with
        the independence selectivity between them.  Without any history this
        is just ``raw_est``.
        """
        c = self._corr.get(mask)
        if c is not None:
            return c
        k = self.known(mask)
        if k is not None:
            c = k
        elif popcount(mask) < 2 or (self.history is None and self.card_fn is None):
            c = self.raw_est(mask)
        else:
            best = 0
            sub = (mask - 1) & mask
            while sub:
                if self.known(sub) is not None and (popcount(sub), -sub) > (popcount(best), -best):
                    best = sub
                sub = (sub - 1) & mask
            if not best:
                c = self.raw_est(mask)
            else:
                rest = mask & ~best
                denom = self.raw_est(best) * self.raw_est(rest)
                c = 0.0 if denom == 0 else self.corrected(best) * self.corrected(rest) * self.raw_est(mask) / denom
        self._corr[mask] = c
        return c

    def est(self, mask: int) -> float:
        e = self._est.get(mask)
        if e is not None:
            return e
        known = self.known(mask)
        if known is not None:
            e = known
        elif any(mask >> i & 1 for i in self.empty):
            e = 0.0
        else:
            e = max(1.0, self.corrected(mask))
            if self.factor is not None and popcount(mask) >= 2:
                e *= self.factor
        self._est[mask] = e
        return e

    # -- graph --------------------------------------------------------------------

    def adjacent(self, a: int, b: int) -> bool:
        for i in range(self.n):
            if a >> i & 1 and self.adj[i] & b:
                return True
        return False

    def connected(self, mask: int) -> bool:
        if mask == 0:
            return False
        start = mask & -mask
        seen = start
        frontier = start
        while frontier:
            nxt = 0
            for i in range(self.n):
                if frontier >> i & 1:
                    nxt |= self.adj[i]
            nxt &= mask & ~seen
            seen |= nxt
            frontier = nxt
        return seen == mask

    def components(self, mask: int | None = None) -> list[int]:
        rest = (1 << self.n) - 1 if mask is None else mask
        comps = []
        while rest:
            start = rest & -rest
            seen = frontier = start
            while frontier:
                nxt = 0
                for i in range(self.n):
                    if frontier >> i & 1:
                        nxt |= self.adj[i]
                nxt &= rest & ~seen
                seen |= nxt
                frontier = nxt
            comps.append(seen)
            rest &= ~seen
        return comps

    # -- plan construction ------------------------------------------------------

    def leaf_plans(self, i: int) -> list[PlanNode]:
        r = self.rels[i]
        b = self.ctx.relations[r]
        p = self.params
        n_rows = float(self.ctx.row_count(r))
        filters = self.filters[i]
        est = self.est(1 << i)
        common = dict(est_rows=est, relations=frozenset((r,)), columns=b.columns, relation=r,
                      filters=filters, base_rows=n_rows, mask=1 << i)
        c = seqscan_cost(n_rows, len(filters), p)
        plans = [PlanNode("SeqScan", est_cost=c, own_cost=c, **common)]
        for f in filters:
            if f.is_colcol or f.op != "=" or f.left.name not in b.indexed:
                continue
            matches = n_rows * self.sel(f)
            c = indexscan_cost(matches, len(filters) - 1, p)
            plans.append(PlanNode("IndexScan", est_cost=c, own_cost=c, index_column=f.left,
                                  index_value=f.right, index_matches=matches, **common))
        return plans

    def best_leaf(self, i: int) -> PlanNode:
        return _argmin(self.leaf_plans(i))

    def join_keys(self, outer_mask: int, inner_mask: int) -> tuple[tuple[ColumnRef, ColumnRef], ...]:
        keys = []
        for by_rel in self.classes:
            o = [by_rel[i][0] for i in by_rel if outer_mask >> i & 1]
            n = [by_rel[i][0] for i in by_rel if inner_mask >> i & 1]
            if o and n:
                keys.append((min(o), min(n)))
        return tuple(sorted(keys))

    def join_filters(self, outer_mask: int, inner_mask: int) -> tuple[Predicate, ...]:
        both = outer_mask | inner_mask
        return tuple(p for p, m in self.residual
                     if m & both == m and m & outer_mask != m and m & inner_mask != m)

    def join_plans(self, outer: PlanNode, inner: PlanNode) -> list[PlanNode]:
        """All physical joins of two subplans with ``outer`` on the probe side."""
        p = self.params
        mask = outer.mask | inner.mask
        out = self.est(mask)
        keys = self.join_keys(outer.mask, inner.mask)
        filters = self.join_filters(outer.mask, inner.mask)
        o_rows, i_rows = outer.est_rows, inner.est_rows
        base = outer.est_cost + inner.est_cost
        common = dict(children=(outer, inner), est_rows=out, relations=outer.relations | inner.relations,
                      columns=outer.columns + inner.columns, filters=filters, keys=keys, mask=mask)
        own = nestloop_cost(o_rows, i_rows, out, p)
        plans = [PlanNode("NestedLoopJoin", est_cost=base + own, own_cost=own, **common)]
        if not keys:
            return plans
        own = hashjoin_cost(o_rows, i_rows, out, p)
        plans.append(PlanNode("HashJoin", est_cost=base + own, own_cost=own, **common))
        presorted = (self._presorted(outer, keys, 0), self._presorted(inner, keys, 1))
        own = mergejoin_cost(o_rows, i_rows, out, presorted[0], presorted[1], p)
        plans.append(PlanNode("MergeJoin", est_cost=base + own, own_cost=own, presorted=presorted, **common))
        if len(keys) == 1 and directmap_admissible(inner, self.ctx, self.threshold, keys[0][1], self.max_map_size):
            own = directmap_cost(o_rows, i_rows, out, p)
            plans.append(PlanNode("DirectmapJoin", est_cost=base + own, own_cost=own, **common))
        return plans

    def _presorted(self, node: PlanNode, keys, side: int) -> bool:
        if not node.is_leaf or len(keys) != 1:
            return False
        return self.ctx.relations[node.relation].presorted_on(keys[0][side].name)

    def best_join(self, a: PlanNode, b: PlanNode) -> PlanNode:
        return _argmin(self.join_plans(a, b) + self.join_plans(b, a))

    # -- search ---------------------------------------------------------------------

    def plan(self) -> PlanNode:
        if self.n == 0:
            raise ValueError("cannot plan an empty subquery")
        if self.n <= self.dp_limit:
            best = self._dp()
        else:
            best = self._greedy()
        full = (1 << self.n) - 1
        if full in best:
            return best[full]
        parts = sorted((best[c] for c in self.components()), key=lambda t: (t.est_rows, t.serialize()))
        acc = parts[0]
        for nxt in parts[1:]:
            acc = self.best_join(acc, nxt)
        return acc

    def _dp(self) -> dict[int, PlanNode]:
        best: dict[int, PlanNode] = {1 << i: self.best_leaf(i) for i in range(self.n)}
        for mask in range(1, 1 << self.n):
            if mask & (mask - 1) == 0 or not self.connected(mask):
                continue
            low = mask & -mask
            cands = []
            sub = (mask - 1) & mask
            while sub:
                if sub & low:
                    other = mask ^ sub
                    left, right = best.get(sub), best.get(other)
                    if left is not None and right is not None and self.adjacent(sub, other):
                        cands.extend(self.join_plans(left, right))
                        cands.extend(self.join_plans(right, left))
                sub = (sub - 1) & mask
            if cands:
                best[mask] = _argmin(cands)
        return best

    def _greedy(self) -> dict[int, PlanNode]:
        """Greedy operator ordering: repeatedly join the connected pair with the smallest result."""
        best: dict[int, PlanNode] = {1 << i: self.best_leaf(i) for i in range(self.n)}
        live = [best[1 << i] for i in range(self.n)]
        while True:
            choice = None
            for x in range(len(live)):
                for y in range(x + 1, len(live)):
                    a, b = live[x], live[y]
                    if not self.adjacent(a.mask, b.mask):
                        continue
                    j = self.best_join(a, b)
                    k = (j.est_rows, j.est_cost, j.serialize())
                    if choice is None or k < choice[0]:
                        choice = (k, x, y, j)
            if choice is None:
                break
            _, x, y, j = choice
            live = [t for i, t in enumerate(live) if i not in (x, y)] + [j]
            best[j.mask] = j
        return best


def _argmin(plans: list[PlanNode]) -> PlanNode:
    best = plans[0]
    for p in plans[1:]:
        if p.est_cost < best.est_cost or (p.est_cost == best.est_cost and p.serialize() < best.serialize()):
            best = p
    return best


def plan_subquery(sub: Subquery, ctx: EstimationContext, params: CostParams | None = None, **kw) -> PlanNode:
    return Planner(sub, ctx, params, **kw).plan()
