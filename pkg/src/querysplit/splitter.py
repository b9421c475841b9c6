"""Query splitting: MinSubquery, RelationshipCenter and EntityCenter.

Each splitter returns a deterministic list of subqueries (sorted by their
serialization) that covers the input query.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .catalog import Catalog
from .query import EqualityClosure, Predicate, SPJQuery, Subquery

log = logging.getLogger(__name__)

ENTITY = "entity"
RELATIONSHIP = "relationship"
SPLITTERS = ("minsubquery", "relcenter", "entitycenter")


@dataclass(frozen=True)
class RelationClass:
    relation: str
    cls: str


@dataclass(frozen=True)
class SplitGraph:
    vertices: tuple[str, ...]
    edges: tuple[tuple[str, str, Predicate], ...]

    def out_neighbors(self, v: str) -> set[str]:
        return {b for a, b, _ in self.edges if a == v}

    def reversed(self) -> "SplitGraph":
        return SplitGraph(self.vertices, tuple(sorted(((b, a, p) for a, b, p in self.edges), key=_edge_key)))


def _edge_key(e) -> tuple:
    return (e[0], e[1], str(e[2]))


def classify(q: SPJQuery, catalog: Catalog) -> list[RelationClass]:
    """Entity iff the relation's primary key is referenced by some foreign key."""
    src = q.source_map
    referenced = catalog.referenced_relations()
    out = []
    for r in sorted(q.relations):
        base = src.get(r)
        cls = ENTITY if base is not None and base in referenced else RELATIONSHIP
        out.append(RelationClass(r, cls))
    return out


def _multi(p: Predicate) -> bool:
    return len(p.relations) > 1


def _subquery_over(rels, preds) -> Subquery:
    rels = frozenset(rels)
    return Subquery(rels, frozenset(p for p in preds if p.relations <= rels))


def _finish(subs: list[Subquery], q: SPJQuery, preds) -> list[Subquery]:
    covered = set().union(*(s.relations for s in subs)) if subs else set()
    for r in sorted(q.relations - covered):
        subs.append(_subquery_over((r,), preds))
    unique = {s.key: s for s in subs}
    return [unique[k] for k in sorted(unique)]


def min_subquery(q: SPJQuery) -> list[Subquery]:
    """One subquery per relation pair joined by a predicate; islands become singletons."""
    subs = []
    for p in sorted(q.predicates, key=str):
        if _multi(p):
            subs.append(_subquery_over(p.relations, q.predicates))
    islands = q.relations - set().union(*(s.relations for s in subs)) if subs else q.relations
    if subs and islands:
        log.info("relations %s take part in no join; split as singletons", sorted(islands))
    return _finish(subs, q, q.predicates)


def remove_redundant(preds) -> frozenset[Predicate]:
    """Drop column equalities implied by the others, sparing foreign-key joins when possible."""
    kept = set(preds)
    cands = [p for p in preds if p.is_equijoin and _multi(p)]
    order = sorted((p for p in cands if not p.is_fk_join), key=str) + sorted(
        (p for p in cands if p.is_fk_join), key=str)
    for p in order:
        rest = kept - {p}
        if EqualityClosure(rest).implies(p):
            kept = rest
    return frozenset(kept)


def split_graph(q: SPJQuery, catalog: Catalog, preds=None) -> SplitGraph:
    classes = {c.relation: c.cls for c in classify(q, catalog)}
    preds = q.predicates if preds is None else preds
    edges = set()
    for p in preds:
        if not _multi(p):
            continue
        if p.is_fk_join and p.fk_holder is not None:
            other = next(r for r in p.relations if r != p.fk_holder)
            edges.add((p.fk_holder, other, p))
            continue
        rels = sorted(p.relations)
        for i, a in enumerate(rels):
            for b in rels[i + 1:]:
                if classes[a] == classes[b]:
                    edges.add((a, b, p))
                    edges.add((b, a, p))
                elif classes[a] == RELATIONSHIP:
                    edges.add((a, b, p))
                else:
                    edges.add((b, a, p))
    return SplitGraph(tuple(sorted(q.relations)), tuple(sorted(edges, key=_edge_key)))


def _centered(q: SPJQuery, catalog: Catalog, reverse: bool) -> list[Subquery]:
    reduced = remove_redundant(q.predicates)
    g = split_graph(q, catalog, reduced)
    if reverse:
        g = g.reversed()
    subs = []
    for v in g.vertices:
        out = g.out_neighbors(v)
        if out:
            subs.append(_subquery_over({v} | out, reduced))
    return _finish(subs, q, reduced)


def relationship_center(q: SPJQuery, catalog: Catalog) -> list[Subquery]:
    """Center each subquery on a vertex of the split graph and its out-neighbors."""
    return _centered(q, catalog, reverse=False)


def entity_center(q: SPJQuery, catalog: Catalog) -> list[Subquery]:
    return _centered(q, catalog, reverse=True)


def split(q: SPJQuery, catalog: Catalog, method: str) -> list[Subquery]:
    if method == "minsubquery":
        return min_subquery(q)
    if method == "relcenter":
        return relationship_center(q, catalog)
    if method == "entitycenter":
        return entity_center(q, catalog)
    raise ValueError(f"unknown splitter {method!r}; expected one of {SPLITTERS}")
