from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from querysplit.catalog import AttributeDef, Catalog, ForeignKey, MemoryBudget, RelationDef, materialize
from querysplit.errors import SingularSystem
from querysplit.optimizer import (
    DEFAULT_SEL, PARAM_NAMES, BoundRelation, CostParams, EstimationContext, PlanNode, calibrate,
    conjunction_selectivity, directmap_admissible, encouragement_factor, estimate_join_card, optimal_mode_record,
    plan_cost, selectivity,
)
from querysplit.optimizer.cost import directmap_cost, hashjoin_cost, seqscan_cost
from querysplit.pipeline import Session
from querysplit.query import ColumnRef, make_predicate, parse_query
from querysplit.stats import analyze

import oracle
from conftest import movie_databases, movie_queries, rel


def bound(name, values_by_col):
    cols = list(values_by_col)
    rows = list(zip(*values_by_col.values()))
    stored = materialize(name, rows, [AttributeDef(c) for c in cols], MemoryBudget(1 << 30))
    q = tuple(f"{name}.{c}" for c in cols)
    stats = analyze(stored).renamed(dict(zip(cols, q)))
    return BoundRelation(name, stored, q, stats, name)


def col(n):
    return ColumnRef(n.split(".")[0], n)


@pytest.fixture
def uniform_ctx():
    a = bound("A", {"a": [0, 0, 1, 1]})
    b = bound("B", {"a": [0, 0, 1, 1, 2, 2]})
    return EstimationContext({"A": a, "B": b})


def test_join_selectivity_uniform(uniform_ctx):
    p = make_predicate(col("A.a"), "=", col("B.a"))
    assert math.isclose(selectivity(p, uniform_ctx), 1 / 3)
    est = estimate_join_card(4, 6, [p], uniform_ctx)
    truth = oracle.nested_loop_equijoin([(0,), (0,), (1,), (1,)], [(0,), (0,), (1,), (1,), (2,), (2,)], 0, 0)
    assert math.isclose(est, 8) and sum(truth.values()) == 8


def test_eq_constant_on_mcv(uniform_ctx):
    assert selectivity(make_predicate(col("A.a"), "=", 0), uniform_ctx) == 0.5


def test_missing_stats_default():
    r = bound("A", {"a": [1]})
    ctx = EstimationContext({"A": BoundRelation("A", r.stored, r.columns, None, "A")})
    assert selectivity(make_predicate(col("A.a"), "=", 1), ctx) == DEFAULT_SEL


def test_join_card_trivia(uniform_ctx):
    assert estimate_join_card(3, 5, [], uniform_ctx) == 15
    p = make_predicate(col("A.a"), "=", col("B.a"))
    assert estimate_join_card(0, 6, [p], uniform_ctx) == 0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["A.a", "B.a"]), st.sampled_from(["=", "<", ">=", "<>"]),
                          st.integers(-1, 3)), max_size=4))
def test_conjunction_is_product(preds):
    ctx = EstimationContext({"A": bound("A", {"a": [0, 0, 1, 1]}), "B": bound("B", {"a": [0, 1, 2, 2, 2, 5]})})
    ps = [make_predicate(col(c), op, v) for c, op, v in preds]
    assert conjunction_selectivity(ps, ctx) == math.prod(selectivity(p, ctx) for p in ps)


def test_cost_examples():
    p = CostParams()
    assert math.isclose(seqscan_cost(1000, 0, p), 100)
    assert seqscan_cost(0, 0, p) == 0
    # choose rows so the hash join costs exactly 400
    assert math.isclose(directmap_cost(10000, 2000, 0, p) * 2, hashjoin_cost(10000, 2000, 0, p))
    assert math.isclose(hashjoin_cost(10000, 2000, 0, p), 380)


def test_hash_build_on_small_filtered_side():
    cat = Catalog([rel("A", ["x", "y"]), rel("B", ["x", "y"])])
    cat.load_rows("A", [(i % 500, i) for i in range(1000)])
    cat.load_rows("B", [(i % 500, i) for i in range(1000)])
    q = parse_query("SELECT A.y FROM A, B WHERE A.x = B.x AND B.y < 10", cat)
    s = Session(cat)
    s.start(q, "t")
    plan = s.planner(q.as_subquery()).plan()
    assert plan.kind == "HashJoin"
    assert plan.inner.relation == "B" and plan.outer.relation == "A"


def test_directmap_admissible_examples():
    r = bound("R", {"k": list(range(1000))})
    ctx = EstimationContext({"R": r})
    leaf = PlanNode("SeqScan", est_rows=900, base_rows=1000, relation="R")
    assert directmap_admissible(leaf, ctx, 0.05)
    leaf.est_rows = 10
    assert not directmap_admissible(leaf, ctx, 0.05)
    join = PlanNode("HashJoin", children=(leaf, leaf), est_rows=900, base_rows=1000)
    assert not directmap_admissible(join, ctx, 0.05)
    # negative keys cannot index the map
    neg = bound("N", {"k": [-1, 2, 3]})
    leaf = PlanNode("SeqScan", est_rows=3, base_rows=3, relation="N")
    assert not directmap_admissible(leaf, EstimationContext({"N": neg}), 0.05, col("N.k"))


def test_history_record():
    h = {}
    optimal_mode_record("1100", 42, h)
    assert h["1100"] == 42 and h.get("0110") is None
    optimal_mode_record("1100", 7, h)
    assert h == {"1100": 7}
    assert encouragement_factor(7) == 0.1 and encouragement_factor(8) == 0.5


def _planner(cat, sql, **kw):
    q = parse_query(sql, cat)
    s = Session(cat)
    s.start(q, "t")
    return q, s.planner(q.as_subquery(), **kw)


CHAIN = "SELECT k.id FROM k, mk, t, ci WHERE k.id = mk.keyword AND mk.movie = t.id AND t.id = ci.movie"


def test_history_replaces_estimate(movies):
    # sorted aliases: ci, k, mk, t -> "1100" is {ci, k}; use {k, mk} = "0110"
    _, p = _planner(movies, CHAIN, history={"0110": 42}, factor=0.1)
    assert p.est(p.mask_of(["k", "mk"])) == 42
    plan = p.plan()
    for n in plan.walk():
        if n.relations == {"k", "mk"}:
            assert n.est_rows == 42


def test_encouragement_factor_on_unexplored(movies):
    _, plain = _planner(movies, CHAIN)
    _, opt = _planner(movies, CHAIN, history={}, factor=0.1)
    m = plain.mask_of(["mk", "t"])
    assert math.isclose(opt.est(m), 0.1 * plain.est(m))
    assert opt.est(plain.mask_of(["t"])) == plain.est(plain.mask_of(["t"]))


def all_plans(p, mask):
    """Every join tree over ``mask`` without cross products, all operator choices."""
    if mask & (mask - 1) == 0:
        return p.leaf_plans(mask.bit_length() - 1)
    out = []
    sub = (mask - 1) & mask
    while sub:
        other = mask ^ sub
        if p.connected(sub) and p.connected(other) and p.adjacent(sub, other):
            for a in all_plans(p, sub):
                for b in all_plans(p, other):
                    out.extend(p.join_plans(a, b))
        sub = (sub - 1) & mask
    return out


@settings(max_examples=60, deadline=None)
@given(movie_databases(max_rows=40), movie_queries(min_rel=2, max_rel=4, all_fks=True))
def test_dp_matches_exhaustive(cat, sql):
    q, p = _planner(cat, sql)
    full = (1 << p.n) - 1
    if not p.connected(full):
        return
    best = p.plan()
    exhaustive = min(x.est_cost for x in all_plans(p, full))
    assert math.isclose(best.est_cost, exhaustive, rel_tol=1e-12)


@settings(max_examples=40, deadline=None)
@given(movie_databases(max_rows=5), movie_queries(min_rel=2, max_rel=4, all_fks=True))
def test_full_history_equals_true_card_dp(cat, sql):
    q, p0 = _planner(cat, sql)
    rels = p0.rels
    truth = {}
    for mask in range(1, 1 << p0.n):
        subset = [r for i, r in enumerate(rels) if mask >> i & 1]
        truth[p0.bitmap(mask)] = oracle.subset_cardinality(q, cat, subset)
    _, hist = _planner(cat, sql, history=dict(truth), factor=0.1)
    _, orac = _planner(cat, sql, card_fn=truth.get)
    assert hist.plan().serialize() == orac.plan().serialize()


@settings(max_examples=60, deadline=None)
@given(movie_databases(max_rows=30), movie_queries(min_rel=1, max_rel=4),
       st.integers(0, 4), st.floats(0.001, 10))
def test_cost_monotone_in_params(cat, sql, which, bump):
    _, p = _planner(cat, sql)
    plan = p.plan()
    base = CostParams()
    v = base.as_vector()
    v[which] += bump
    assert plan_cost(plan, CostParams.from_vector(v)) >= plan_cost(plan, base) - 1e-9
    assert math.isclose(plan_cost(plan, base), plan.est_cost, rel_tol=1e-9)


def _calibration_plans():
    cat = Catalog([RelationDef("A", [AttributeDef("id"), AttributeDef("g")], "id"),
                   RelationDef("B", [AttributeDef("id"), AttributeDef("g")], "id", [ForeignKey("g", "A", "id")])])
    cat.load_rows("A", [(i, i % 7) for i in range(700)])
    cat.load_rows("B", [(i, i % 3) for i in range(1234)])
    sqls = ["SELECT * FROM A", "SELECT * FROM B", "SELECT * FROM A WHERE A.g = 1",
            "SELECT * FROM B WHERE B.g < 2 AND B.g > 0", "SELECT * FROM A WHERE A.id = 5",
            "SELECT * FROM B WHERE B.id = 9 AND B.g = 0", "SELECT * FROM B WHERE B.g = 1", "SELECT * FROM A, B WHERE A.id = B.id",
            "SELECT * FROM A, B WHERE A.g = B.g AND A.id < 20"]
    return [_planner(cat, s)[1].plan() for s in sqls]


def test_calibration_round_trip():
    truth = CostParams()
    meas = [(pl, plan_cost(pl, truth)) for pl in _calibration_plans()]
    got = calibrate(meas, use_true_rows=False)
    for name in PARAM_NAMES:
        assert abs(getattr(got, name) - getattr(truth, name)) < 1e-6, name


def test_calibration_needs_rank():
    plans = _calibration_plans()[:4]
    with pytest.raises(SingularSystem):
        calibrate([(pl, 1.0) for pl in plans], use_true_rows=False)


def test_calibration_zero_latency():
    got = calibrate([(pl, 0.0) for pl in _calibration_plans()], use_true_rows=False)
    assert np.all(got.as_vector() == 0)
