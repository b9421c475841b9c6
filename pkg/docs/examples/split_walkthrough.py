"""Split a five-relation movie query three ways and run each split.

    python docs/examples/split_walkthrough.py
"""

from __future__ import annotations

from querysplit import (AttributeDef, Catalog, ForeignKey, MemoryBudget, RelationDef, Session,
                        parse_query, run_query_split, run_static, split)


def rel(name, cols, pk=None, fks=()):
    return RelationDef(name, tuple(AttributeDef(c, "int64") for c in cols), pk,
                       tuple(ForeignKey(c, r, rc) for c, r, rc in fks))


cat = Catalog([
    rel("keyword", ["id", "kw"], pk="id"),
    rel("name", ["id", "gender"], pk="id"),
    rel("title", ["id", "year"], pk="id"),
    rel("movie_keyword", ["movie", "keyword"], fks=[("movie", "title", "id"), ("keyword", "keyword", "id")]),
    rel("cast_info", ["movie", "person"], fks=[("movie", "title", "id"), ("person", "name", "id")]),
])
cat.load_rows("keyword", [(i, i % 3) for i in range(6)])
cat.load_rows("name", [(i, i % 2) for i in range(8)])
cat.load_rows("title", [(i, 2000 + i) for i in range(10)])
cat.load_rows("movie_keyword", [(m, m % 6) for m in range(10)] + [(m, (m + 1) % 6) for m in range(0, 10, 2)])
cat.load_rows("cast_info", [(m, (m * 3 + k) % 8) for m in range(10) for k in range(2)])

sql = """
SELECT t.id, n.id, k.kw
FROM title AS t, movie_keyword AS mk, keyword AS k, cast_info AS ci, name AS n
WHERE t.id = mk.movie AND mk.keyword = k.id AND t.id = ci.movie AND ci.person = n.id
  AND mk.movie = ci.movie AND k.kw = 1 AND t.year > 2002
"""
q = parse_query(sql, cat)
print("normal form:", q, sep="\n", end="\n\n")

for method in ("minsubquery", "relcenter", "entitycenter"):
    print(f"{method}:")
    for s in split(q, cat, method):
        print("   ", s.key)

session = Session(cat, MemoryBudget(1 << 20))
base = sorted(run_static(q, session).rows)
res = run_query_split(q, session, "relcenter", "hybrid_sqrt")
print(f"\nrelcenter/hybrid_sqrt returned {len(res.rows)} rows; matches static: {sorted(res.rows) == base}")
for step in res.steps:
    print(f"    {step.subquery} -> {step.temp or 'result'} ({step.rows} rows)")
for b in res.boundaries:
    print(f"    boundary {b.temp}: estimated {b.estimated}, true {b.true_rows}")
