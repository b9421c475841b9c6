from __future__ import annotations

import pytest

from querysplit.catalog import AttributeDef, Catalog, ForeignKey, RelationDef


def rel(name, cols, pk=None, fks=()):
    return RelationDef(name, [AttributeDef(c) for c in cols], pk, [ForeignKey(*fk) for fk in fks])


def movie_defs():
    """Keyword/cast schema: mk and ci are relationships, k, n, t entities."""
    return [
        rel("k", ["id", "kw"], "id"),
        rel("n", ["id", "gender"], "id"),
        rel("t", ["id", "year"], "id"),
        rel("mk", ["id", "movie", "keyword"], "id", [("movie", "t", "id"), ("keyword", "k", "id")]),
        rel("ci", ["id", "movie", "person"], "id", [("movie", "t", "id"), ("person", "n", "id")]),
    ]


def movie_catalog():
    cat = Catalog(movie_defs())
    cat.load_rows("k", [(0, 1), (1, 1), (2, 2), (3, 3)])
    cat.load_rows("n", [(0, 0), (1, 1), (2, 0), (3, 1), (4, 0)])
    cat.load_rows("t", [(0, 1), (1, 1), (2, 3), (3, 4), (4, 1), (5, 2)])
    cat.load_rows("mk", [(0, 0, 0), (1, 0, 1), (2, 1, 0), (3, 2, 2), (4, 4, 1), (5, 4, 3), (6, 5, 0), (7, 1, 1)])
    cat.load_rows("ci", [(0, 0, 0), (1, 0, 2), (2, 1, 1), (3, 2, 3), (4, 4, 4), (5, 4, 0), (6, 5, 2), (7, 3, 1),
                         (8, 1, 4), (9, 0, 3), (10, 4, 2), (11, 2, 0)])
    return cat


EXAMPLE4 = ("SELECT k.kw, n.gender FROM k, mk, t, ci, n WHERE k.id = mk.keyword AND mk.movie = t.id "
            "AND t.id = ci.movie AND ci.person = n.id AND mk.movie = ci.movie AND k.kw = 1 AND t.year < 2")


@pytest.fixture
def movies():
    return movie_catalog()


# -- random databases and queries over the movie schema ---------------------------

from hypothesis import strategies as st  # noqa: E402

ATTRS = {"k": ["id", "kw"], "n": ["id", "gender"], "t": ["id", "year"],
         "mk": ["id", "movie", "keyword"], "ci": ["id", "movie", "person"]}
FK_EDGES = [("mk", "movie", "t"), ("mk", "keyword", "k"), ("ci", "movie", "t"), ("ci", "person", "n")]


@st.composite
def movie_databases(draw, max_rows=5):
    cat = Catalog(movie_defs())
    for name, cols in ATTRS.items():
        n = draw(st.integers(0 if name in ("k", "n") else 1, max_rows))
        rows = [(i,) + tuple(draw(st.integers(0, 3)) for _ in cols[1:]) for i in range(n)]
        cat.load_rows(name, rows)
    return cat


@st.composite
def movie_queries(draw, min_rel=1, max_rel=4, all_fks=False, ops=("=", "<", "<=", ">", ">=", "<>")):
    """SQL over the movie schema using FK joins, extra column comparisons and filters."""
    rels = sorted(draw(st.sets(st.sampled_from(sorted(ATTRS)), min_size=min_rel, max_size=max_rel)))
    preds = []
    fks = [(a, c, b) for a, c, b in FK_EDGES if a in rels and b in rels]
    for a, c, b in fks:
        if all_fks or draw(st.booleans()):
            preds.append(f"{a}.{c} = {b}.id")
    if len(rels) >= 2:
        for _ in range(draw(st.integers(0, 2))):
            a, b = draw(st.permutations(rels))[:2]
            op = draw(st.sampled_from(ops))
            preds.append(f"{a}.{draw(st.sampled_from(ATTRS[a]))} {op} {b}.{draw(st.sampled_from(ATTRS[b]))}")
    for _ in range(draw(st.integers(0, 2))):
        a = draw(st.sampled_from(rels))
        op = draw(st.sampled_from(ops))
        preds.append(f"{a}.{draw(st.sampled_from(ATTRS[a][1:]))} {op} {draw(st.integers(0, 3))}")
    cols = [f"{a}.{c}" for a in rels for c in ATTRS[a]]
    proj = draw(st.lists(st.sampled_from(cols), min_size=1, max_size=3, unique=True))
    sql = f"SELECT {', '.join(proj)} FROM {', '.join(rels)}"
    if preds:
        sql += " WHERE " + " AND ".join(preds)
    return sql


# -- generic six-relation instances ------------------------------------------------

GEN_ENTITIES = ["e0", "e1", "e2"]
GEN_RELS = {"r0": ("e0", "e1"), "r1": ("e1", "e2"), "r2": ("e0", "e2")}


def generic_defs():
    defs = [rel(e, ["id", "a", "b"], "id") for e in GEN_ENTITIES]
    for r, (x, y) in GEN_RELS.items():
        defs.append(rel(r, ["fx", "fy", "a"], None, [("fx", x, "id"), ("fy", y, "id")]))
    return defs


GEN_COLS = {e: ["id", "a", "b"] for e in GEN_ENTITIES} | {r: ["fx", "fy", "a"] for r in GEN_RELS}


def make_instance(rng, max_rows=8, domain=4, max_rel=6, ops=("=", "=", "=", "<", "<=", ">", ">=", "<>")):
    """(catalog, sql): ≤ ``max_rel`` relations, ≤ ``max_rows`` rows, values in [0, domain)."""
    cat = Catalog(generic_defs())

    def val():
        return rng.randrange(domain)

    for e in GEN_ENTITIES:
        cat.load_rows(e, [(i, val(), val()) for i in range(rng.randint(0, domain))])
    for r in GEN_RELS:
        cat.load_rows(r, [(val(), val(), val()) for _ in range(rng.randint(0, max_rows))])
    rels = sorted(rng.sample(sorted(GEN_COLS), rng.randint(1, max_rel)))
    preds = []
    holders = {}
    for r, (x, y) in GEN_RELS.items():
        if r not in rels:
            continue
        for c, e in (("fx", x), ("fy", y)):
            if e in rels and rng.random() < 0.75:
                preds.append(f"{r}.{c} = {e}.id")
                holders.setdefault(e, []).append(f"{r}.{c}")
    # two foreign keys into one entity: sometimes also equate them directly (a redundant join)
    for cols in holders.values():
        if len(cols) >= 2 and rng.random() < 0.5:
            preds.append(f"{cols[0]} = {cols[1]}")
    if len(rels) >= 2:
        for _ in range(rng.randint(0, 3)):
            a, b = rng.sample(rels, 2)
            preds.append(f"{a}.{rng.choice(GEN_COLS[a])} {rng.choice(ops)} {b}.{rng.choice(GEN_COLS[b])}")
    for _ in range(rng.randint(0, 3)):
        a = rng.choice(rels)
        preds.append(f"{a}.{rng.choice(GEN_COLS[a])} {rng.choice(ops)} {val()}")
    cols = [f"{a}.{c}" for a in rels for c in GEN_COLS[a]]
    proj = dict.fromkeys(rng.choice(cols) for _ in range(rng.randint(1, 3)))
    sql = f"SELECT {', '.join(proj)} FROM {', '.join(rels)}"
    if preds:
        sql += " WHERE " + " AND ".join(preds)
    return cat, sql


def spj_instances(**kw):
    return st.randoms(use_true_random=False).map(lambda rng: make_instance(rng, **kw))


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def record_criterion(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
