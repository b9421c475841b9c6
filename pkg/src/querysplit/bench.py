"""Synthetic correlated workload, benchmark runner, q-error and reports.

The generated schema is a small movie database: nine entity tables and
three relationship tables.  Every entity row carries a latent cluster.
Within a table, ``grp`` is the cluster and ``tag`` copies it with
probability ``strength`` (else uniform).  A relationship row picks its
movie uniformly and each other foreign key from the movie's cluster with
probability ``strength`` (else uniformly).  Equality filters on ``grp`` and
``tag`` are therefore correlated with each other and across joins, which
is exactly what an independence-based estimator gets wrong.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import statistics
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import DEFAULT_BENCH_BUDGET, AttributeDef, Catalog, ForeignKey, MemoryBudget, RelationDef, format_schema, load_dataset
from .errors import MemoryExceeded
from .optimizer.cost import CostParams
from .optimizer.plan import PlanNode
from .pipeline import QueryResult, Session, execute_fixed, run
from .query import ColumnRef, SPJQuery, Subquery, make_predicate, parse_query

log = logging.getLogger(__name__)

INF = math.inf

ENTITIES = {
    # name: (alias, rows)
    "title": ("t", 5000),
    "kind_type": ("kt", 1000),
    "keyword": ("k", 2000),
    "name": ("n", 5000),
    "role_type": ("rt", 1000),
    "char_name": ("chn", 3000),
    "company_name": ("cn", 2000),
    "company_type": ("ct", 1000),
    "country": ("cnt", 1000),
}
RELATIONSHIPS = {
    "movie_keyword": ("mk", 30000, {"movie_id": "title", "keyword_id": "keyword"}),
    "cast_info": ("ci", 30000, {"movie_id": "title", "person_id": "name", "role_id": "role_type",
                                "char_id": "char_name"}),
    "movie_companies": ("mc", 10000, {"movie_id": "title", "company_id": "company_name",
                                      "company_type_id": "company_type"}),
}
# entity -> entity foreign keys
ENTITY_FKS = {"title": {"kind_id": "kind_type"}, "company_name": {"country_id": "country"}}


@dataclass
class WorkloadSpec:
    seed: int = 7
    strength: float = 0.8
    clusters: int = 10
    n_queries: int = 30
    min_relations: int = 4
    max_relations: int = 9
    scale: float = 1.0
    strengths: dict[str, float] = field(default_factory=dict)
    redundant_join_rate: float = 0.4
    include_wide_query: bool = True

    def strength_of(self, table: str) -> float:
        return self.strengths.get(table, self.strength)

    def rows_of(self, table: str) -> int:
        base = ENTITIES[table][1] if table in ENTITIES else RELATIONSHIPS[table][1]
        return max(1, int(round(base * self.scale)))


def schema_defs() -> list[RelationDef]:
    defs = []
    for name in ENTITIES:
        fks = ENTITY_FKS.get(name, {})
        attrs = [AttributeDef("id"), AttributeDef("grp"), AttributeDef("tag")]
        attrs += [AttributeDef(c) for c in fks]
        defs.append(RelationDef(name, attrs, "id", [ForeignKey(c, t, "id") for c, t in fks.items()]))
    for name, (_, _, fks) in RELATIONSHIPS.items():
        attrs = [AttributeDef("id")] + [AttributeDef(c) for c in fks]
        defs.append(RelationDef(name, attrs, "id", [ForeignKey(c, t, "id") for c, t in fks.items()]))
    return defs


def _pick(rng, cluster_of_target: np.ndarray, members: list[np.ndarray], clusters: np.ndarray, s: float) -> np.ndarray:
    """Per source row: a target id from the source's cluster with probability s, else uniform."""
    n = len(clusters)
    follow = rng.random(n) < s
    out = rng.integers(0, len(cluster_of_target), n)
    for c, ids in enumerate(members):
        sel = follow & (clusters == c)
        k = int(sel.sum())
        if k and len(ids):
            out[sel] = ids[rng.integers(0, len(ids), k)]
    return out


def generate_tables(spec: WorkloadSpec) -> dict[str, list[tuple]]:
    rng = np.random.default_rng(spec.seed)
    C = spec.clusters
    tables: dict[str, list[tuple]] = {}
    cluster: dict[str, np.ndarray] = {}
    members: dict[str, list[np.ndarray]] = {}
    for name in ENTITIES:
        n = spec.rows_of(name)
        g = rng.integers(0, C, n)
        cluster[name] = g
        members[name] = [np.flatnonzero(g == c) for c in range(C)]
    for name in ENTITIES:
        n = spec.rows_of(name)
        s = spec.strength_of(name)
        g = cluster[name]
        tag = np.where(rng.random(n) < s, g, rng.integers(0, C, n))
        cols = [np.arange(n), g, tag]
        for col, target in ENTITY_FKS.get(name, {}).items():
            cols.append(_pick(rng, cluster[target], members[target], g, s))
        tables[name] = [tuple(int(v) for v in row) for row in zip(*cols)]
    for name, (_, _, fks) in RELATIONSHIPS.items():
        n = spec.rows_of(name)
        s = spec.strength_of(name)
        movies = rng.integers(0, spec.rows_of("title"), n)
        g = cluster["title"][movies]
        cols = [np.arange(n), movies]
        for col, target in fks.items():
            if col == "movie_id":
                continue
            cols.append(_pick(rng, cluster[target], members[target], g, s))
        tables[name] = [tuple(int(v) for v in row) for row in zip(*cols)]
    return tables


# -- query templates ------------------------------------------------------------

ALIAS = {name: a for name, (a, _) in ENTITIES.items()}
ALIAS.update({name: a for name, (a, _, _) in RELATIONSHIPS.items()})


def _template_query(rng, spec: WorkloadSpec, shape: str) -> tuple[list[str], list[str], list[str]] | None:
    """Relations, join predicates and filters of one random query (None when out of bounds)."""
    rels = ["title"]
    joins: list[str] = []
    rel_tables = list(RELATIONSHIPS)
    if shape == "chain":
        chosen = list(rng.choice(rel_tables, size=2, replace=False))
    elif shape == "star":
        chosen = list(rng.choice(rel_tables, size=int(rng.integers(2, 4)), replace=False))
    else:
        chosen = list(rng.choice(rel_tables, size=int(rng.integers(1, 4)), replace=False))
    entity_neighbors: dict[str, list[str]] = {}
    for r in sorted(chosen):
        rels.append(r)
        joins.append(f"{ALIAS[r]}.movie_id = t.id")
        targets = [(c, t) for c, t in RELATIONSHIPS[r][2].items() if c != "movie_id"]
        k = 1 if shape == "chain" else int(rng.integers(1, len(targets) + 1))
        picks = [targets[i] for i in sorted(rng.choice(len(targets), size=k, replace=False))]
        entity_neighbors[r] = []
        for col, target in picks:
            rels.append(target)
            joins.append(f"{ALIAS[r]}.{col} = {ALIAS[target]}.id")
            entity_neighbors[r].append(target)
    if shape == "snowflake" or rng.random() < 0.3:
        if "company_name" in rels and rng.random() < 0.7:
            rels.append("country")
            joins.append("cn.country_id = cnt.id")
        if rng.random() < 0.5:
            rels.append("kind_type")
            joins.append("t.kind_id = kt.id")
    if not spec.min_relations <= len(rels) <= spec.max_relations:
        return None
    z = int(rng.integers(0, spec.clusters))
    filters = []
    entities = [r for r in rels if r in ENTITIES and r != "title"]
    # every relationship table gets at least one filtered neighbor, keeping results small
    filtered = set()
    for r, ents in entity_neighbors.items():
        filtered.add(ents[int(rng.integers(0, len(ents)))])
    for e in entities:
        if rng.random() < 0.3:
            filtered.add(e)
    for e in sorted(filtered):
        a = ALIAS[e]
        filters.append(f"{a}.grp = {z}")
        if rng.random() < 0.5:
            filters.append(f"{a}.tag = {z}")
    filters.append(f"t.grp = {z}")
    if rng.random() < 0.5:
        filters.append(f"t.tag = {z}")
    rel_in = [r for r in sorted(chosen)]
    if len(rel_in) >= 2 and rng.random() < spec.redundant_join_rate:
        a, b = rel_in[0], rel_in[1]
        joins.append(f"{ALIAS[a]}.movie_id = {ALIAS[b]}.movie_id")
    return rels, joins, filters


def _wide_query(spec: WorkloadSpec) -> tuple[list[str], list[str], list[str]]:
    """All three relationship tables around a broadly filtered title, joined pairwise on the movie too.

    Its result is several times larger than any base table, so any plan that
    materializes a relationship-relationship join ahead of the last step
    exhausts a budget of a couple of base tables.
    """
    rels = ["title", "movie_keyword", "cast_info", "movie_companies"]
    joins = ["mk.movie_id = t.id", "ci.movie_id = t.id", "mc.movie_id = t.id",
             "mk.movie_id = ci.movie_id", "ci.movie_id = mc.movie_id", "mk.movie_id = mc.movie_id"]
    filters = [f"t.kind_id < {max(1, spec.rows_of('kind_type') // 4)}"]
    return rels, joins, filters


def _to_sql(rels, joins, filters, rng) -> str:
    cols = [f"{ALIAS[r]}.id" for r in rels if r in ENTITIES]
    k = min(len(cols), 3)
    proj = [cols[i] for i in sorted(rng.choice(len(cols), size=k, replace=False))]
    frm = ", ".join(f"{r} AS {ALIAS[r]}" for r in rels)
    return f"SELECT {', '.join(proj)} FROM {frm} WHERE {' AND '.join(joins + filters)}"


def generate_queries(spec: WorkloadSpec) -> list[str]:
    rng = np.random.default_rng(spec.seed + 1)
    shapes = ("chain", "star", "snowflake")
    out = []
    if spec.include_wide_query:
        rels, joins, filters = _wide_query(spec)
        out.append(_to_sql(rels, joins, filters, rng))
    attempts = 0
    while len(out) < spec.n_queries:
        attempts += 1
        if attempts > 100 * spec.n_queries:
            raise RuntimeError("query template bounds cannot be met")
        q = _template_query(rng, spec, shapes[len(out) % 3])
        if q is None:
            continue
        sql = _to_sql(*q, rng)
        if sql not in out:
            out.append(sql)
    return out


def generate(spec: WorkloadSpec, out_dir: str | Path) -> Path:
    """Write schema.txt, one CSV per table and queries/qNN.sql under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    defs = schema_defs()
    (out / "schema.txt").write_text(format_schema(defs), encoding="utf-8")
    tables = generate_tables(spec)
    for d in defs:
        with open(out / f"{d.name}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(d.attribute_names)
            w.writerows(tables[d.name])
    qdir = out / "queries"
    qdir.mkdir(exist_ok=True)
    for i, sql in enumerate(generate_queries(spec), 1):
        (qdir / f"q{i:02d}.sql").write_text(sql + "\n", encoding="utf-8")
    return out


def build_catalog(spec: WorkloadSpec) -> Catalog:
    """In-memory equivalent of ``generate`` followed by ``load_dataset``."""
    cat = Catalog(schema_defs())
    for name, rows in generate_tables(spec).items():
        cat.load_rows(name, rows)
    cat.analyze_all()
    return cat


def load_queries(data_dir: str | Path) -> list[tuple[str, str]]:
    qdir = Path(data_dir) / "queries"
    return [(p.stem, p.read_text(encoding="utf-8").strip()) for p in sorted(qdir.glob("*.sql"))]


# -- measurement ----------------------------------------------------------------

def q_error(estimated: float, true_card: float) -> float:
    """max(est/true, true/est); 1 when both are zero, infinity when exactly one is."""
    if estimated < 0 or true_card < 0:
        raise ValueError("cardinalities must be non-negative")
    if estimated == 0 and true_card == 0:
        return 1.0
    if estimated == 0 or true_card == 0:
        return INF
    return max(estimated / true_card, true_card / estimated)


@dataclass(frozen=True)
class Cell:
    """One benchmark configuration: a mode plus, for split mode, splitter and order."""

    mode: str
    split: str | None = None
    order: str | None = None

    @property
    def label(self) -> str:
        if self.mode == "split":
            return f"split:{self.split}:{self.order}"
        return self.mode

    @classmethod
    def parse(cls, text: str) -> "Cell":
        parts = text.split(":")
        if parts[0] == "split":
            return cls("split", parts[1] if len(parts) > 1 else "relcenter",
                       parts[2] if len(parts) > 2 else "hybrid_sqrt")
        return cls(parts[0])


DEFAULT_CELLS = (Cell("static"), Cell("split", "relcenter", "hybrid_sqrt"))


@dataclass
class CellResult:
    latency: float | None
    latencies: list[float]
    qerrors: list[tuple[int, float]]
    peak_bytes: int
    oom: bool
    plans: list[str]
    n_rows: int | None
    digest: Counter | None = field(default=None, repr=False)
    iterations: int = 1
    converged: bool = True
    error: str | None = None


@dataclass
class RunReport:
    queries: list[str]
    cells: list[str]
    results: dict[tuple[str, str], CellResult] = field(default_factory=dict)
    mismatches: list[str] = field(default_factory=list)
    latency_reliable: bool = True

    def total_latency(self, cell: str) -> float | None:
        vals = [self.results[(q, cell)].latency for q in self.queries if (q, cell) in self.results]
        if any(v is None for v in vals):
            return None
        return sum(vals)

    def qerror_by_depth(self, cell: str) -> dict[int, float]:
        """Mean q-error per join depth (infinite q-errors excluded from the mean)."""
        buckets: dict[int, list[float]] = {}
        for q in self.queries:
            r = self.results.get((q, cell))
            if r is None or r.oom:
                continue
            for d, e in r.qerrors:
                if math.isfinite(e):
                    buckets.setdefault(d, []).append(e)
        return {d: sum(v) / len(v) for d, v in sorted(buckets.items())}

    def oom_count(self, cell: str) -> int:
        return sum(1 for q in self.queries if self.results.get((q, cell)) and self.results[(q, cell)].oom)


def _one_run(q: SPJQuery, catalog: Catalog, cell: Cell, budget: int, params: CostParams,
             factor: float | None = None, **kw) -> QueryResult:
    session = Session(catalog, MemoryBudget(budget), params, **kw)
    opts = {}
    if cell.mode == "split":
        opts = dict(split_method=cell.split, order=cell.order)
    elif cell.mode == "optimal" and factor is not None:
        opts = dict(factor=factor)
    return run(q, session, cell.mode, **opts)


def _measure(q: SPJQuery, catalog: Catalog, cell: Cell, budget: int, params: CostParams,
             repetitions: int, warmup: int, session_kw: dict) -> CellResult:
    times = []
    res = None
    try:
        for i in range(warmup + repetitions):
            t0 = time.perf_counter()
            res = _one_run(q, catalog, cell, budget, params, **session_kw)
            dt = time.perf_counter() - t0
            if cell.mode == "optimal":
                # the baseline is the converged plan, not the search that found it
                dt = res.steps[-1].plan_seconds + res.steps[-1].exec_seconds
            if i >= warmup:
                times.append(dt)
    except MemoryExceeded as e:
        log.info("%s: out of memory (%s)", cell.label, e)
        return CellResult(None, times, [], 0, True, [], None, error=str(e))
    qerrs = [(e.depth, q_error(e.est_rows, e.true_rows)) for e in res.estimates]
    return CellResult(statistics.median(times), times, qerrs, res.peak_bytes, False, res.plans,
                      len(res.rows), Counter(res.rows), res.iterations, res.converged)


def bench(catalog: Catalog, queries: Sequence[tuple[str, str]], cells: Sequence[Cell] = DEFAULT_CELLS,
          repetitions: int = 5, warmup: int = 1, budget: int = DEFAULT_BENCH_BUDGET,
          params: CostParams | None = None, check_results: bool = True, parallel_sessions: int = 1,
          **session_kw) -> RunReport:
    """Run every (query, cell) ``warmup + repetitions`` times; record medians and q-errors.

    Out-of-memory cells are recorded, not raised.  Successful cells of one
    query must agree on the result multiset, otherwise AssertionError.
    With ``parallel_sessions > 1`` the cells of a query run concurrently, each
    in its own session and budget; latencies are then marked unreliable.
    """
    params = params or CostParams()
    if repetitions < 1:
        raise ValueError("repetitions must be at least 1")
    report = RunReport([name for name, _ in queries], [c.label for c in cells])
    report.latency_reliable = parallel_sessions <= 1
    pool = ThreadPoolExecutor(parallel_sessions) if parallel_sessions > 1 else None
    try:
        for name, sql in queries:
            q = parse_query(sql, catalog)
            args = (q, catalog)
            rest = (budget, params, repetitions, warmup, session_kw)
            if pool is None:
                results = [_measure(*args, c, *rest) for c in cells]
            else:
                results = list(pool.map(lambda c: _measure(*args, c, *rest), cells))
            digests = {}
            for cell, r in zip(cells, results):
                if not r.oom:
                    digests[cell.label] = r.digest
                if not check_results:
                    r.digest = None
                report.results[(name, cell.label)] = r
            if check_results and len(digests) > 1:
                ref_label, ref = next(iter(digests.items()))
                for label, d in digests.items():
                    if d != ref:
                        report.mismatches.append(f"{name}: {label} differs from {ref_label}")
            if report.mismatches:
                raise AssertionError("result multisets differ across modes: " + "; ".join(report.mismatches))
    finally:
        if pool is not None:
            pool.shutdown()
    return report


def calibration_measurements(catalog: Catalog, queries: Sequence[tuple[str, str]], repetitions: int = 3,
                             params: CostParams | None = None, max_pairs: int = 2000) -> list[tuple[PlanNode, float]]:
    """(plan, median seconds) pairs for calibration.

    Covers every scan alternative of every relation in the workload, a point
    lookup on each indexed column, and every physical join of each joined
    relation pair in both orientations.  Nested loops over more than
    ``max_pairs`` estimated row pairs are skipped.
    """
    out = []
    seen = set()

    def measure(plan, q, session):
        key = plan.serialize()
        if key in seen:
            return
        seen.add(key)
        execute_fixed(plan, q, session)  # warm-up; also builds lazily created indexes
        times = [execute_fixed(plan, q, session)[1] for _ in range(repetitions)]
        out.append((plan, statistics.median(times)))

    for _, sql in queries:
        q = parse_query(sql, catalog)
        session = Session(catalog, MemoryBudget(DEFAULT_BENCH_BUDGET), params)
        session.start(q, "calibrate")
        for r in sorted(q.relations):
            sub = Subquery(frozenset((r,)), frozenset(p for p in q.predicates if p.relations == {r}))
            for plan in session.planner(sub).leaf_plans(0):
                measure(plan, q, session)
            base = q.source_map[r]
            stored = catalog[base]
            for col in sorted(catalog.indexed_columns(base)):
                if not len(stored):
                    continue
                values = sorted(row[stored.column_index(col)] for row in stored.rows)
                pred = make_predicate(ColumnRef(r, f"{r}.{col}"), "=", values[len(values) // 2])
                for plan in session.planner(Subquery(frozenset((r,)), frozenset((pred,)))).leaf_plans(0):
                    measure(plan, q, session)
        pairs = sorted({tuple(sorted(p.relations)) for p in q.predicates if len(p.relations) == 2})
        for pair in pairs:
            sub = Subquery(frozenset(pair), frozenset(p for p in q.predicates if p.relations <= set(pair)))
            planner = session.planner(sub)
            a, b = planner.best_leaf(0), planner.best_leaf(1)
            for plan in planner.join_plans(a, b) + planner.join_plans(b, a):
                if plan.kind == "NestedLoopJoin" and a.est_rows * b.est_rows > max_pairs:
                    continue
                measure(plan, q, session)
    return out


# -- reports ---------------------------------------------------------------------

def _fmt_latency(r: CellResult | None) -> str:
    if r is None:
        return ""
    if r.oom:
        return "OOM"
    return f"{r.latency:.6f}"


def latency_csv(run: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query"] + run.cells)
    for q in run.queries:
        w.writerow([q] + [_fmt_latency(run.results.get((q, c))) for c in run.cells])
    return buf.getvalue()


def qerror_csv(run: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cell", "depth", "mean_qerror", "nodes"])
    for c in run.cells:
        counts = Counter()
        for q in run.queries:
            r = run.results.get((q, c))
            if r and not r.oom:
                counts.update(d for d, e in r.qerrors if math.isfinite(e))
        for d, v in run.qerror_by_depth(c).items():
            w.writerow([c, d, f"{v:.4f}", counts[d]])
    return buf.getvalue()


def oom_csv(run: RunReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query"] + run.cells)
    for q in run.queries:
        w.writerow([q] + ["OOM" if run.results.get((q, c)) and run.results[(q, c)].oom else ""
                          for c in run.cells])
    return buf.getvalue()


def _aligned(rows: list[list[str]]) -> str:
    if not rows:
        return ""
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(v.rjust(wd) if i else v.ljust(wd) for i, (v, wd) in enumerate(zip(r, widths)))
                     for r in rows)


def text_report(run: RunReport) -> str:
    rows = [["query"] + run.cells]
    for q in run.queries:
        rows.append([q] + [_fmt_latency(run.results.get((q, c))) for c in run.cells])
    totals = []
    for c in run.cells:
        t = run.total_latency(c)
        n_oom = run.oom_count(c)
        totals.append(f"{n_oom} OOM" if t is None else f"{t:.6f}")
    rows.append(["total"] + totals)
    parts = ["latency (seconds, median)", _aligned(rows), "", "mean q-error by join depth"]
    depths = sorted({d for c in run.cells for d in run.qerror_by_depth(c)})
    qrows = [["depth"] + run.cells]
    for d in depths:
        qrows.append([str(d)] + [f"{run.qerror_by_depth(c).get(d, float('nan')):.3f}" for c in run.cells])
    parts.append(_aligned(qrows))
    return "\n".join(parts) + "\n"


def report(run: RunReport, out_dir: str | Path, fmt: str = "csv") -> list[Path]:
    """Write latency, q-error and OOM tables plus plan texts; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("csv", "both"):
        for fname, text in (("latency.csv", latency_csv(run)), ("qerror.csv", qerror_csv(run)),
                            ("oom.csv", oom_csv(run))):
            (out / fname).write_text(text, encoding="utf-8")
            written.append(out / fname)
    if fmt in ("text", "both"):
        (out / "report.txt").write_text(text_report(run), encoding="utf-8")
        written.append(out / "report.txt")
    pdir = out / "plans"
    pdir.mkdir(exist_ok=True)
    for (q, c), r in sorted(run.results.items()):
        if r.plans:
            (pdir / f"{q}__{c.replace(':', '_')}.txt").write_text("\n".join(r.plans) + "\n", encoding="utf-8")
    return written


def load(data_dir: str | Path) -> Catalog:
    cat = load_dataset(data_dir)
    cat.analyze_all()
    return cat
