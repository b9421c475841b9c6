"""The ten acceptance criteria, each at its stated size and tolerance.

Every test records one PASS/FAIL line; the lines are printed together at
the end of the pytest run.
"""

from __future__ import annotations

import dataclasses
import math
import random
import statistics
import time
from collections import Counter

import pytest

from querysplit import bench as B
from querysplit import executor
from querysplit.catalog import Catalog, MemoryBudget
from querysplit.errors import MemoryExceeded
from querysplit.optimizer import CostParams, PlanNode, calibrate, directmap_admissible, plan_cost
from querysplit.optimizer.cost import PARAM_NAMES
from querysplit.pipeline import ORDERS, Session, execute_fixed, run_optimal, run_query_split
from querysplit.query import covers, implied_only, parse_query
from querysplit.splitter import SPLITTERS, split

import oracle
from conftest import make_instance, record_criterion, rel

N_INSTANCES = 1000


# -- criteria 1, 2 and 4 share one pass over the randomized instances ------------------

@pytest.fixture(scope="module")
def theorem_suite():
    rng = random.Random(20240607)
    stats = Counter()
    failures = []
    t0 = time.perf_counter()
    for i in range(N_INSTANCES):
        cat, sql = make_instance(rng)
        q = parse_query(sql, cat)
        ref = oracle.evaluate_pruned(q, cat)
        session = Session(cat)
        transitive = False
        for m in SPLITTERS:
            subs = split(q, cat, m)
            stats["cover_checks"] += 1
            if covers(subs, q):
                stats["covered"] += 1
            else:
                failures.append(("cover", i, m, sql))
            transitive |= bool(implied_only(subs, q))
            for o in ORDERS:
                r = run_query_split(q, session, m, o)
                stats["runs"] += 1
                if Counter(r.rows) == ref:
                    stats["equal"] += 1
                else:
                    failures.append(("result", i, m, o, sql))
                for b in r.boundaries:
                    stats["boundaries"] += 1
                    stats["exact"] += b.estimated == b.true_rows
        stats["transitive"] += transitive
    stats["seconds"] = time.perf_counter() - t0
    return stats, failures


def test_criterion_1_theorem(theorem_suite):
    stats, failures = theorem_suite
    ok = stats["equal"] == stats["runs"] == N_INSTANCES * len(SPLITTERS) * len(ORDERS)
    record_criterion(1, ok, f"{stats['equal']}/{stats['runs']} split runs equal the oracle "
                            f"({N_INSTANCES} instances, {stats['seconds']:.0f}s with criteria 2 and 4)")
    assert ok, [f for f in failures if f[0] == "result"][:5]


def test_criterion_2_cover(theorem_suite):
    stats, failures = theorem_suite
    ok = stats["covered"] == stats["cover_checks"] and stats["transitive"] >= 50
    record_criterion(2, ok, f"{stats['covered']}/{stats['cover_checks']} splits cover; "
                            f"{stats['transitive']} instances need equality transitivity (need >= 50)")
    assert ok, [f for f in failures if f[0] == "cover"][:5]


def test_criterion_4_boundaries(theorem_suite):
    stats, _ = theorem_suite
    ok = stats["boundaries"] > 0 and stats["exact"] == stats["boundaries"]
    record_criterion(4, ok, f"{stats['exact']}/{stats['boundaries']} materialized boundaries have q-error 1")
    assert ok


# -- criterion 3 ------------------------------------------------------------------------

def test_criterion_3_join_operators(monkeypatch):
    builds = Counter()
    real_build = executor.directmap_build

    def checked_build(inner, key_pos, max_size=executor.MAX_MAP_SIZE):
        m = real_build(inner, key_pos, max_size)
        m.validate()
        builds["validated"] += 1
        return m

    monkeypatch.setattr(executor, "directmap_build", checked_build)
    rng = random.Random(3)
    agree = 0
    t0 = time.perf_counter()
    for _ in range(500):
        cat = Catalog([rel("O", ["k", "v"]), rel("I", ["k", "v"])])
        dom = rng.randint(1, 12)
        cat.load_rows("O", [(rng.randrange(dom), rng.randrange(4)) for _ in range(rng.randint(0, 40))])
        cat.load_rows("I", [(rng.randrange(dom), rng.randrange(4)) for _ in range(rng.randint(0, 40))])
        q = parse_query("SELECT O.k, O.v, I.k, I.v FROM O, I WHERE O.k = I.k", cat)
        s = Session(cat)
        s.start(q, "t")
        p = s.planner(q.as_subquery())
        o, i = p.best_leaf(p.idx["O"]), p.best_leaf(p.idx["I"])
        hj = next(x for x in p.join_plans(o, i) if x.kind == "HashJoin")
        binds = {"O": s.bind("O"), "I": s.bind("I")}
        outs = [Counter(executor.execute(dataclasses.replace(hj, kind=k, _ser=None), binds, cat))
                for k in ("NestedLoopJoin", "HashJoin", "MergeJoin", "DirectmapJoin")]
        agree += all(x == outs[0] for x in outs) and outs[0] == oracle.nested_loop_equijoin(
            cat["O"].rows, cat["I"].rows, 0, 0)
    ok = agree == 500 and builds["validated"] == 500
    record_criterion(3, ok, f"{agree}/500 pairs agree across NLJ/Hash/Merge/Directmap; "
                            f"{builds['validated']} maps validated ({time.perf_counter() - t0:.1f}s)")
    assert ok


# -- criterion 5 --------------------------------------------------------------------------

def _exhaustive(p, mask):
    if mask & (mask - 1) == 0:
        return min(x.est_cost for x in p.leaf_plans(mask.bit_length() - 1))
    best = math.inf
    sub = (mask - 1) & mask
    while sub:
        other = mask ^ sub
        if p.connected(sub) and p.connected(other) and p.adjacent(sub, other):
            for a in _all_plans(p, sub):
                for b in _all_plans(p, other):
                    for j in p.join_plans(a, b):
                        best = min(best, j.est_cost)
        sub = (sub - 1) & mask
    return best


def _all_plans(p, mask):
    if mask & (mask - 1) == 0:
        return p.leaf_plans(mask.bit_length() - 1)
    out = []
    sub = (mask - 1) & mask
    while sub:
        other = mask ^ sub
        if p.connected(sub) and p.connected(other) and p.adjacent(sub, other):
            for a in _all_plans(p, sub):
                for b in _all_plans(p, other):
                    out.extend(p.join_plans(a, b))
        sub = (sub - 1) & mask
    return out


def test_criterion_5_dp_optimality():
    rng = random.Random(5)
    done = equal = 0
    t0 = time.perf_counter()
    while done < 200:
        cat, sql = make_instance(rng, max_rows=40, domain=30, max_rel=4)
        q = parse_query(sql, cat)
        s = Session(cat)
        s.start(q, "t")
        p = s.planner(q.as_subquery())
        full = (1 << p.n) - 1
        if p.n < 2 or not p.connected(full):
            continue
        done += 1
        equal += p.plan().est_cost == _exhaustive(p, full)
    ok = equal == 200
    record_criterion(5, ok, f"{equal}/200 connected queries: DP cost == exhaustive minimum "
                            f"({time.perf_counter() - t0:.1f}s)")
    assert ok


# -- the default workload (criteria 6, 7, 8, 10) ----------------------------------------------

@pytest.fixture(scope="module")
def workload():
    spec = B.WorkloadSpec()
    assert spec.strength >= 0.7
    cat = B.build_catalog(spec)
    return spec, cat, [(f"q{i:02d}", sql) for i, sql in enumerate(B.generate_queries(spec), 1)]


def _paired_latency(first, final, q, cat):
    """Median latency of both plans, run alternately so drift hits them equally."""
    def once(plan):
        return execute_fixed(plan, q, Session(cat, MemoryBudget(B.DEFAULT_BENCH_BUDGET)))[1]

    a, b = [once(first)], [once(final)]
    reps = 5 if max(a[0], b[0]) >= 0.5 else 15
    for _ in range(reps - 1):
        a.append(once(first))
        b.append(once(final))
    return statistics.median(a), statistics.median(b)


def test_criterion_6_optimal_convergence(workload):
    _, cat, queries = workload
    converged = fast = 0
    slow = []
    for name, sql in queries:
        q = parse_query(sql, cat)
        r = run_optimal(q, Session(cat, MemoryBudget(B.DEFAULT_BENCH_BUDGET)))
        converged += r.converged and r.iterations <= 20
        first = r.steps[0].exec_seconds
        if r.final_plan.serialize() == r.first_plan.serialize():
            fast += 1
            continue
        if first < 0.5:
            first, final = _paired_latency(r.first_plan, r.final_plan, q, cat)
        else:
            final = statistics.median(execute_fixed(r.final_plan, q, Session(
                cat, MemoryBudget(B.DEFAULT_BENCH_BUDGET)))[1] for _ in range(5))
        if final <= 1.05 * first:
            fast += 1
        else:
            slow.append(f"{name} {final:.3f}s vs {first:.3f}s")
    n = len(queries)
    ok = converged == n and fast >= 0.9 * n
    record_criterion(6, ok, f"{converged}/{n} converge within 20 iterations; {fast}/{n} converged plans "
                            f"<= 1.05x first-iteration latency (need >= {math.ceil(0.9 * n)})"
                            + (f"; slower: {', '.join(slow)}" if slow else ""))
    assert ok


def test_criterion_7_directional_speedup(workload):
    _, cat, queries = workload
    static, splitc = B.Cell("static"), B.Cell("split", "relcenter", "hybrid_sqrt")
    t0 = time.perf_counter()
    run = B.bench(cat, queries, [static, splitc], repetitions=5, warmup=1)
    elapsed = time.perf_counter() - t0
    ts, tq = run.total_latency(static.label), run.total_latency(splitc.label)
    qs, qq = run.qerror_by_depth(static.label), run.qerror_by_depth(splitc.label)
    depths = [d for d in sorted(qs) if d >= 2 and d in qq]
    lower = all(qq[d] < qs[d] for d in depths)
    ok = ts is not None and tq is not None and tq < ts and depths and lower and elapsed < 15 * 60
    record_criterion(7, ok, f"total latency split {tq:.2f}s vs static {ts:.2f}s; mean q-error lower at "
                            f"{sum(qq[d] < qs[d] for d in depths)}/{len(depths)} depths >= 2; "
                            f"bench {elapsed / 60:.1f} min")
    assert ok


def test_criterion_8_oom(workload):
    _, cat, queries = workload
    budget = 2 * max(cat[n].byte_size for n in cat.defs)
    found = None
    for name, sql in queries:
        q = parse_query(sql, cat)
        try:
            run_query_split(q, Session(cat, MemoryBudget(budget)), "minsubquery", "hybrid_sqrt")
            continue
        except MemoryExceeded:
            pass
        try:
            r = run_query_split(q, Session(cat, MemoryBudget(budget)), "relcenter", "hybrid_sqrt")
        except MemoryExceeded:
            continue
        found = (name, len(r.rows), r.peak_bytes)
        break
    ok = found is not None
    detail = (f"{found[0]}: MinSubquery exceeds {budget} B, RelationshipCenter completes "
              f"({found[1]} rows, peak {found[2]} B)" if ok else f"no query separates the splitters at {budget} B")
    record_criterion(8, ok, detail)
    assert ok


def test_criterion_10_directmap_rule(workload):
    _, cat, queries = workload
    admissible = rejected_nonleaf = 0
    bad = []
    for _, sql in queries:
        q = parse_query(sql, cat)
        s = Session(cat)
        s.start(q, "t")
        p = s.planner(q.as_subquery())
        real = p.join_plans

        def watch(outer, inner, real=real, p=p):
            plans = real(outer, inner)
            nonlocal admissible, rejected_nonleaf
            hj = next((x for x in plans if x.kind == "HashJoin"), None)
            for x in plans:
                if x.kind == "DirectmapJoin":
                    admissible += 1
                    if not inner.is_leaf or x.own_cost != hj.own_cost / 2:
                        bad.append(x.serialize())
            if not inner.is_leaf and hj is not None:
                rejected_nonleaf += not directmap_admissible(inner, p.ctx, p.threshold)
                if any(x.kind == "DirectmapJoin" for x in plans):
                    bad.append(f"non-leaf inner admitted: {inner.serialize()}")
            return plans

        p.join_plans = watch
        p.plan()
    ok = admissible > 0 and not bad and rejected_nonleaf > 0
    record_criterion(10, ok, f"{admissible} admissible directmap joins cost exactly hash/2; "
                             f"{rejected_nonleaf} join-subtree inners rejected; {len(bad)} violations")
    assert ok, bad[:5]


# -- criterion 9 ---------------------------------------------------------------------------

def test_criterion_9_calibration_round_trip():
    spec = B.WorkloadSpec(scale=0.1, n_queries=8)
    cat = B.build_catalog(spec)
    plans = []
    for sql in B.generate_queries(spec):
        q = parse_query(sql, cat)
        s = Session(cat)
        s.start(q, "t")
        p = s.planner(q.as_subquery())
        for i in range(p.n):
            plans.extend(p.leaf_plans(i))
        plans.append(p.plan())
    # point lookups give index scans with varying match counts
    for sql in ("SELECT * FROM cast_info AS ci WHERE ci.person_id = 3",
                "SELECT * FROM movie_keyword AS mk WHERE mk.movie_id = 7",
                "SELECT * FROM title AS t WHERE t.id = 11"):
        q = parse_query(sql, cat)
        s = Session(cat)
        s.start(q, "t")
        plans.extend(s.planner(q.as_subquery()).leaf_plans(0))
    truth = CostParams(2.5, 4.25, 0.05, 0.11, 0.013)
    t0 = time.perf_counter()
    got = calibrate([(pl, plan_cost(pl, truth)) for pl in plans], use_true_rows=False)
    elapsed = time.perf_counter() - t0
    errs = {n: abs(getattr(got, n) - getattr(truth, n)) / getattr(truth, n) for n in PARAM_NAMES}
    ok = max(errs.values()) <= 1e-6 and elapsed < 5
    record_criterion(9, ok, f"{len(plans)} measurements; max relative error {max(errs.values()):.2e} "
                            f"({elapsed:.2f}s)")
    assert ok, errs
