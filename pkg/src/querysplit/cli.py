"""Command line front end: ``querysplit <subcommand> ...``.

The dataset root is ``--data-dir``, else ``$QS_DATA_DIR``, else ``./data``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import re
import sys
from pathlib import Path

from . import bench as B
from .catalog import DEFAULT_BENCH_BUDGET, DEFAULT_TEST_BUDGET, MemoryBudget
from .errors import MemoryExceeded, QuerySplitError
from .optimizer.cost import PARAM_NAMES, calibrate
from .optimizer.enumerate import DEFAULT_DIRECTMAP_THRESHOLD
from .pipeline import MODES, ORDERS, Session, _with_project, run, run_optimal, run_query_split
from .query import parse_query
from .splitter import SPLITTERS, split

log = logging.getLogger("querysplit")

_UNITS = {"": 1, "b": 1, "k": 1000, "kb": 1000, "m": 1000 ** 2, "mb": 1000 ** 2, "g": 1000 ** 3, "gb": 1000 ** 3,
          "kib": 1024, "mib": 1024 ** 2, "gib": 1024 ** 3}


def parse_size(text: str) -> int:
    """'512MB', '64MiB', '3000000' -> bytes."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([A-Za-z]*)\s*", text)
    if not m or m.group(2).lower() not in _UNITS:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return int(float(m.group(1)) * _UNITS[m.group(2).lower()])


def data_dir(args) -> Path:
    return Path(args.data_dir or os.environ.get("QS_DATA_DIR") or "data")


def _load(args):
    d = data_dir(args)
    if not (d / "schema.txt").exists():
        raise QuerySplitError(f"no dataset at {d} (run `querysplit generate` or set QS_DATA_DIR)")
    return B.load(d)


def _query_text(args) -> str:
    if args.sql:
        return args.sql
    if args.file:
        return Path(args.file).read_text(encoding="utf-8")
    if args.query:
        path = data_dir(args) / "queries" / f"{args.query}.sql"
        return path.read_text(encoding="utf-8")
    raise QuerySplitError("give a query with --sql, --file or --query NAME")


def _write_table(rows: list[list], header: list[str], fmt: str, out=None) -> None:
    out = out or sys.stdout
    if fmt == "csv":
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return
    out.write(B._aligned([header] + [[str(v) for v in r] for r in rows]) + "\n")


def _session(args, catalog) -> Session:
    return Session(catalog, MemoryBudget(args.memory_budget), directmap_threshold=args.threshold_directmap)


# -- subcommands ------------------------------------------------------------------

def cmd_generate(args) -> int:
    spec = B.WorkloadSpec(seed=args.seed, strength=args.strength, n_queries=args.queries, scale=args.scale)
    out = B.generate(spec, data_dir(args))
    print(f"wrote dataset and {spec.n_queries} queries to {out}")
    return 0


def cmd_load(args) -> int:
    cat = _load(args)
    rows = [[n, len(cat[n]), cat[n].byte_size] for n in sorted(cat.defs)]
    _write_table(rows, ["relation", "rows", "bytes"], args.format)
    return 0


def cmd_analyze(args) -> int:
    cat = _load(args)
    names = args.relations or sorted(cat.defs)
    rows = []
    for n in names:
        st = cat.stats(n)
        for col, cs in st.columns.items():
            rows.append([n, col, st.row_count, cs.n_distinct, cs.min_value, cs.max_value, len(cs.mcv),
                         max(0, len(cs.histogram) - 1)])
    _write_table(rows, ["relation", "column", "rows", "n_distinct", "min", "max", "mcv", "buckets"], args.format)
    return 0


def cmd_run(args) -> int:
    cat = _load(args)
    q = parse_query(_query_text(args), cat)
    session = _session(args, cat)
    try:
        if args.mode == "optimal":
            res = run_optimal(q, session, factor=args.encourage_factor)
        elif args.mode == "split":
            res = run_query_split(q, session, args.split, args.order)
        else:
            res = run(q, session, args.mode)
    except MemoryExceeded as e:
        print(f"OOM: {e}", file=sys.stderr)
        return 3
    if not args.quiet:
        _write_table([list(r) for r in res.rows], list(res.columns), args.format)
    err = sys.stderr if not args.quiet else sys.stdout
    print(f"rows: {len(res.rows)}  latency: {res.seconds:.6f}s  peak temp bytes: {res.peak_bytes}", file=err)
    for st in res.steps:
        print(f"  {st.subquery} -> {st.temp or 'result'}: rows={st.rows} plan={st.plan_seconds:.6f}s "
              f"exec={st.exec_seconds:.6f}s", file=err)
    if res.mode == "optimal":
        print(f"  iterations: {res.iterations}  converged: {res.converged}", file=err)
    by_depth: dict[int, list[float]] = {}
    for e in res.estimates:
        by_depth.setdefault(e.depth, []).append(B.q_error(e.est_rows, e.true_rows))
    for d in sorted(by_depth):
        vals = [v for v in by_depth[d] if math.isfinite(v)]
        mean = sum(vals) / len(vals) if vals else math.inf
        print(f"  q-error depth {d}: mean={mean:.3f} max={max(by_depth[d]):.3f} n={len(by_depth[d])}", file=err)
    return 0


def cmd_explain(args) -> int:
    cat = _load(args)
    q = parse_query(_query_text(args), cat)
    if args.stage == "normal":
        print(q)
        return 0
    if args.stage == "split":
        for s in split(q, cat, args.split):
            print(s.to_sql())
        return 0
    session = _session(args, cat)
    session.start(q, "explain")
    plan = _with_project(session.planner(q.as_subquery()).plan(), q.projection, session.params)
    if args.stage == "analyze":
        try:
            for _ in session.run_plan(plan, q.relations):
                pass
        finally:
            session.cleanup()
    print(plan.explain(analyze=args.stage == "analyze"))
    return 0


def cmd_bench(args) -> int:
    cat = _load(args)
    queries = B.load_queries(data_dir(args))
    if args.only:
        queries = [(n, s) for n, s in queries if n in set(args.only)]
    cells = [B.Cell.parse(c) for c in args.cells] if args.cells else [
        B.Cell("static"), B.Cell("split", args.split, args.order)]
    rep = B.bench(cat, queries, cells, repetitions=args.reps, warmup=args.warmup, budget=args.memory_budget,
                  parallel_sessions=args.parallel_sessions, factor=args.encourage_factor,
                  directmap_threshold=args.threshold_directmap)
    out = Path(args.out)
    fmt = "both" if args.format == "text" else "csv"
    for p in B.report(rep, out, fmt):
        print(f"wrote {p}")
    print(B.text_report(rep), end="")
    if not rep.latency_reliable:
        print("note: cells ran concurrently; latencies are not reliable")
    return 0


def cmd_calibrate(args) -> int:
    cat = _load(args)
    queries = B.load_queries(data_dir(args))
    if args.only:
        queries = [(n, s) for n, s in queries if n in set(args.only)]
    meas = B.calibration_measurements(cat, queries, repetitions=args.reps)
    params = calibrate(meas)
    rows = [[n, f"{getattr(params, n):.6g}"] for n in PARAM_NAMES]
    _write_table(rows, ["parameter", "value"], args.format)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-dir", help="dataset root (default: $QS_DATA_DIR or ./data)")
    common.add_argument("--format", choices=("csv", "text"), default="text")
    common.add_argument("--memory-budget", type=parse_size, default=None,
                        help="temp-table budget, e.g. 64MiB or 512MB")
    common.add_argument("--threshold-directmap", type=float, default=DEFAULT_DIRECTMAP_THRESHOLD)
    common.add_argument("-v", "--verbose", action="store_true")

    planning = argparse.ArgumentParser(add_help=False)
    planning.add_argument("--split", choices=SPLITTERS, default="relcenter")
    planning.add_argument("--order", choices=ORDERS, default="hybrid_sqrt")
    planning.add_argument("--encourage-factor", type=float, default=None,
                          help="optimal mode: multiplier for unexplored subsets (default 0.1, 0.5 for 8+ relations)")

    query = argparse.ArgumentParser(add_help=False)
    g = query.add_mutually_exclusive_group()
    g.add_argument("--sql", help="query text")
    g.add_argument("--file", help="file holding the query")
    g.add_argument("--query", help="name of a query under <data-dir>/queries, e.g. q01")

    p = argparse.ArgumentParser(prog="querysplit", description="In-memory SPJ engine with query splitting.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("generate", parents=[common], help="write the synthetic correlated dataset and workload")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--strength", type=float, default=0.8)
    s.add_argument("--queries", type=int, default=30)
    s.add_argument("--scale", type=float, default=1.0)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("load", parents=[common], help="load the dataset and list its relations")
    s.set_defaults(func=cmd_load)

    s = sub.add_parser("analyze", parents=[common], help="print static statistics")
    s.add_argument("relations", nargs="*")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("run", parents=[common, planning, query], help="execute one query")
    s.add_argument("--mode", choices=MODES, default="split")
    s.add_argument("--quiet", action="store_true", help="suppress result rows")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("explain", parents=[common, planning, query], help="show normal form, split or plan")
    s.add_argument("--stage", choices=("normal", "split", "plan", "analyze"), default="plan")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("bench", parents=[common, planning], help="run the workload and write reports")
    s.add_argument("--cells", nargs="*", help="e.g. static reopt optimal split:relcenter:hybrid_sqrt")
    s.add_argument("--only", nargs="*", help="query names to run")
    s.add_argument("--reps", type=int, default=5)
    s.add_argument("--warmup", type=int, default=1)
    s.add_argument("--parallel-sessions", type=int, default=1)
    s.add_argument("--out", default="bench_out")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("calibrate", parents=[common], help="fit cost parameters to measured latencies")
    s.add_argument("--reps", type=int, default=1)
    s.add_argument("--only", nargs="*", help="query names whose relations and joins are measured")
    s.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.memory_budget is None:
        args.memory_budget = DEFAULT_BENCH_BUDGET if args.command == "bench" else DEFAULT_TEST_BUDGET
    try:
        return args.func(args)
    except QuerySplitError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
