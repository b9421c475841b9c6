from __future__ import annotations

from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from querysplit.errors import SQLSyntaxError, UnknownAttribute, UnknownRelation, UnsupportedFeature
from querysplit.query import (
    ColumnRef, EqualityClosure, JoinNode, ProjectNode, RelationNode, SelectNode, Subquery, covers, join_graph,
    make_predicate, normal_form_text, normalize, parse, parse_query, to_sql,
)
from querysplit.splitter import min_subquery, relationship_center

import oracle
from conftest import EXAMPLE4, movie_databases, movie_queries, rel
from querysplit.catalog import Catalog


@pytest.fixture
def ab():
    cat = Catalog([rel("A", ["a", "b"]), rel("B", ["a", "b"])])
    cat.load_rows("A", [(1, 1), (2, 3)])
    cat.load_rows("B", [(1, 3), (2, 3), (2, 4)])
    return cat


def c(name):
    return ColumnRef(name.split(".")[0], name)


def test_parse_two_relations(ab):
    q = parse_query("SELECT A.a FROM A, B WHERE A.a = B.a AND B.b = 3", ab)
    assert q.relations == {"A", "B"} and len(q.predicates) == 2
    assert q.projection == (c("A.a"),)


def test_parse_star(ab):
    q = parse_query("SELECT * FROM A", ab)
    assert q.relations == {"A"} and not q.predicates
    assert [x.name for x in q.projection] == ["A.a", "A.b"]


@pytest.mark.parametrize("sql", [
    "SELECT a FROM A GROUP BY a",
    "SELECT A.a FROM A WHERE A.a = 1 OR A.a = 2",
    "SELECT A.a FROM A LEFT JOIN B ON A.a = B.a",
    "SELECT A.a FROM A WHERE A.a IN (SELECT B.a FROM B)",
])
def test_unsupported(ab, sql):
    with pytest.raises(UnsupportedFeature):
        parse_query(sql, ab)


def test_parse_errors(ab):
    with pytest.raises(SQLSyntaxError):
        parse_query("SELECT A.a FROM A WHERE", ab)
    with pytest.raises(UnknownRelation):
        parse_query("SELECT X.a FROM X", ab)
    with pytest.raises(UnknownAttribute):
        parse_query("SELECT A.zz FROM A", ab)


def test_join_syntax_normalizes_to_selection(ab):
    q = parse_query("SELECT A.b FROM A JOIN B ON A.a = B.a", ab)
    assert q.relations == {"A", "B"}
    assert q.predicates == {make_predicate(c("A.a"), "=", c("B.a"))}


def test_selection_over_product(ab):
    q = parse_query("SELECT A.a, B.b FROM A, B WHERE B.b = 3", ab)
    assert q.predicates == {make_predicate(c("B.b"), "=", 3)}
    assert normal_form_text(q) == "Π[A.a, B.b](σ[B.b = 3](A × B))"


def test_nested_projection_pulled_up(ab):
    # Π[A.a](σ[A.b = 3](Π[A.a, A.b](A ⋈ B))) flattens to one projection over σ over ×
    inner = ProjectNode((c("A.a"), c("A.b")),
                        JoinNode(RelationNode("A", "A"), RelationNode("B", "B"),
                                 (make_predicate(c("A.a"), "=", c("B.a")),)))
    tree = ProjectNode((c("A.a"),), SelectNode((make_predicate(c("A.b"), "=", 3),), inner))
    q = normalize(tree, ab)
    assert q.projection == (c("A.a"),) and len(q.predicates) == 2
    assert Counter(oracle.evaluate_tree(tree, ab)[1]) == oracle.evaluate(q, ab)


def test_projection_hides_columns(ab):
    tree = SelectNode((make_predicate(c("A.b"), "=", 3),), ProjectNode((c("A.a"),), RelationNode("A", "A")))
    with pytest.raises(UnknownAttribute):
        normalize(tree, ab)


def test_fk_annotation(movies):
    q = parse_query(EXAMPLE4, movies)
    fk = {str(p): p.fk_holder for p in q.predicates if p.is_fk_join}
    assert fk == {"k.id = mk.keyword": "mk", "mk.movie = t.id": "mk", "ci.movie = t.id": "ci",
                  "ci.person = n.id": "ci"}


def test_round_trip_sql(movies):
    q = parse_query(EXAMPLE4, movies)
    assert parse_query(to_sql(q), movies) == q


def test_covers_min_subquery_example(movies):
    q = parse_query(EXAMPLE4, movies)
    assert len(min_subquery(q)) == 5 and covers(min_subquery(q), q)


def test_covers_by_transitivity(movies):
    q = parse_query(EXAMPLE4, movies)
    subs = relationship_center(q, movies)
    assert all("mk.movie = ci.movie" not in str(s) for s in subs)
    assert covers(subs, q)


def test_covers_missing_relation(movies):
    q = parse_query(EXAMPLE4, movies)
    subs = [s for s in min_subquery(q) if "n" not in s.relations]
    assert not covers(subs, q)


def test_join_graph(movies):
    g = join_graph(parse_query(EXAMPLE4, movies))
    assert len(g.vertices) == 5 and len(g.edges) == 5
    assert len(join_graph(parse_query("SELECT * FROM k", movies)).edges) == 0
    g = join_graph(parse_query("SELECT k.id FROM k, mk, t, ci WHERE k.id = mk.keyword AND t.id = ci.movie", movies))
    assert g.components() == [frozenset({"ci", "t"}), frozenset({"k", "mk"})]


def test_aliases_of_same_table(movies):
    q = parse_query("SELECT a.kw FROM k a, k AS b WHERE a.kw = b.kw AND b.id = 0", movies)
    assert q.source_map == {"a": "k", "b": "k"}
    assert sum(oracle.evaluate(q, movies).values()) == 2


@settings(max_examples=80, deadline=None)
@given(movie_databases(), movie_queries())
def test_normalize_preserves_semantics(cat, sql):
    tree = parse(sql, cat)
    q = normalize(tree)
    assert Counter(oracle.evaluate_tree(tree.tree, cat)[1]) == oracle.evaluate(q, cat)


@settings(max_examples=80, deadline=None)
@given(movie_databases(), movie_queries(min_rel=2))
def test_join_on_syntax_equivalent(cat, sql):
    # rewriting the WHERE list into explicit JOIN ... ON clauses must not change the result
    q = parse_query(sql, cat)
    rels = sorted(q.relations)
    preds = sorted(q.predicates, key=str)
    # JOIN binds tighter than the comma, so ON may only see the current chain
    chain, on_sql = {rels[0]}, f"SELECT {', '.join(x.name for x in q.projection)} FROM {rels[0]}"
    for r in rels[1:]:
        here = [p for p in preds if p.relations <= chain | {r} and r in p.relations]
        preds = [p for p in preds if p not in here]
        if here:
            chain.add(r)
            on_sql += f" JOIN {r} ON " + " AND ".join(map(str, here))
        else:
            chain = {r}
            on_sql += f", {r}"
    if preds:
        on_sql += " WHERE " + " AND ".join(map(str, preds))
    q2 = parse_query(on_sql, cat)
    assert q2 == q
    assert Counter(oracle.evaluate_tree(parse(on_sql, cat).tree, cat)[1]) == oracle.evaluate(q, cat)


@settings(max_examples=60, deadline=None)
@given(movie_queries(min_rel=2), st.data())
def test_covers_monotone(sql, data):
    from conftest import movie_catalog

    cat = movie_catalog()
    q = parse_query(sql, cat)
    subs = min_subquery(q)
    assert covers(subs, q)
    extra = data.draw(st.sets(st.sampled_from(sorted(q.relations)), min_size=1))
    more = subs + [Subquery(frozenset(extra), frozenset(p for p in q.predicates if p.relations <= extra))]
    assert covers(more, q)


@settings(max_examples=60, deadline=None)
@given(movie_databases(), movie_queries(min_rel=2, ops=("=",)))
def test_implication_is_sound(cat, sql):
    # every predicate dropped as implied holds on each row satisfying the kept ones
    q = parse_query(sql, cat)
    subs = relationship_center(q, cat)
    kept = frozenset().union(*(s.predicates for s in subs))
    if not covers(subs, q):
        return
    closure = EqualityClosure(kept)
    dropped = [p for p in q.predicates if p not in kept]
    assert all(closure.implies(p) for p in dropped)
    from querysplit.query import SPJQuery

    all_cols = tuple(ColumnRef(a, f"{a}.{x}") for a in sorted(q.relations) for x in cat[q.source_map[a]].columns)
    base = SPJQuery(q.relations, kept, all_cols, q.source_map)
    full = SPJQuery(q.relations, q.predicates, all_cols, q.source_map)
    assert oracle.evaluate(base, cat) == oracle.evaluate(full, cat)
