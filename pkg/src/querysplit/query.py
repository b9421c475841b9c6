"""SQL subset parsing, SPJ normal form, equality closure, join graph and cover check.

Columns are identified by a globally unique qualified name (``alias.attr``)
plus the relation that currently holds them.  A base alias ``k`` holds
``k.id``; once ``k`` has been folded into a materialized temp ``m1`` the same
column is referenced as ``ColumnRef("m1", "k.id")``.  Rewriting a subquery
therefore only swaps the holder, never the name.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Union

from scipy.cluster.hierarchy import DisjointSet

from .catalog import INT64, STRING, Catalog
from .errors import (
    SQLSyntaxError,
    TypeMismatch,
    UnknownAttribute,
    UnknownRelation,
    UnsupportedFeature,
)

OPS = ("=", "<", "<=", ">", ">=", "<>")
MIRROR = {"=": "=", "<": ">", "<=": ">=", ">": "<", ">=": "<=", "<>": "<>"}
RANGE_OPS = ("<", "<=", ">", ">=")


@dataclass(frozen=True, order=True)
class ColumnRef:
    rel: str
    name: str

    @property
    def attr(self) -> str:
        """Attribute name within the holding relation's base table."""
        return self.name.split(".", 1)[1]

    def __str__(self) -> str:
        if self.name.startswith(self.rel + "."):
            return self.name
        return f"{self.rel}[{self.name}]"


Constant = Union[int, str]


def _fmt_const(v: Constant) -> str:
    if isinstance(v, str):
        return "'" + v.replace("'", "''") + "'"
    return str(v)


@dataclass(frozen=True)
class Predicate:
    left: ColumnRef
    op: str
    right: Union[ColumnRef, Constant]
    is_fk_join: bool = field(default=False, compare=False)
    fk_holder: str | None = field(default=None, compare=False)

    @property
    def kind(self) -> str:
        return "ColCol" if isinstance(self.right, ColumnRef) else "ColConst"

    @property
    def is_colcol(self) -> bool:
        return isinstance(self.right, ColumnRef)

    @property
    def is_equijoin(self) -> bool:
        return self.op == "=" and isinstance(self.right, ColumnRef)

    @property
    def relations(self) -> frozenset[str]:
        if isinstance(self.right, ColumnRef):
            return frozenset((self.left.rel, self.right.rel))
        return frozenset((self.left.rel,))

    @property
    def columns(self) -> tuple[ColumnRef, ...]:
        if isinstance(self.right, ColumnRef):
            return (self.left, self.right)
        return (self.left,)

    def __str__(self) -> str:
        r = str(self.right) if isinstance(self.right, ColumnRef) else _fmt_const(self.right)
        return f"{self.left} {self.op} {r}"

    def rebind(self, mapping: dict[str, str]) -> "Predicate":
        """Move columns held by relations in ``mapping`` to their new holder."""
        left = ColumnRef(mapping.get(self.left.rel, self.left.rel), self.left.name)
        right = self.right
        if isinstance(right, ColumnRef):
            right = ColumnRef(mapping.get(right.rel, right.rel), right.name)
        return make_predicate(left, self.op, right, self.is_fk_join, self.fk_holder)


def make_predicate(left, op: str, right, is_fk_join: bool = False, fk_holder: str | None = None) -> Predicate:
    """Build a predicate in canonical orientation.

    A column-constant comparison always has the column on the left; a
    column-column comparison has the smaller column on the left.
    """
    if op == "!=":
        op = "<>"
    if op not in OPS:
        raise ValueError(f"unknown comparison operator {op!r}")
    if not isinstance(left, ColumnRef):
        left, right, op = right, left, MIRROR[op]
        if not isinstance(left, ColumnRef):
            raise ValueError("a predicate needs at least one column")
    if isinstance(right, ColumnRef) and right < left:
        left, right, op = right, left, MIRROR[op]
    return Predicate(left, op, right, is_fk_join, fk_holder)


def predicate_sort_key(p: Predicate) -> str:
    return str(p)


def format_predicates(preds: Iterable[Predicate]) -> str:
    return " AND ".join(sorted(str(p) for p in preds))


# -- queries --------------------------------------------------------------------

@dataclass(frozen=True)
class Subquery:
    relations: frozenset[str]
    predicates: frozenset[Predicate] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "relations", frozenset(self.relations))
        object.__setattr__(self, "predicates", frozenset(self.predicates))

    @property
    def key(self) -> str:
        k = self.__dict__.get("_key")
        if k is None:
            k = "{" + ",".join(sorted(self.relations)) + "}"
            if self.predicates:
                k += " WHERE " + format_predicates(self.predicates)
            object.__setattr__(self, "_key", k)
        return k

    def __str__(self) -> str:
        return self.key

    def to_sql(self) -> str:
        sql = "SELECT * FROM " + ", ".join(sorted(self.relations))
        if self.predicates:
            sql += " WHERE " + format_predicates(self.predicates)
        return sql


@dataclass(frozen=True)
class SPJQuery:
    """Normal form Π_P(σ_S(r1 × … × rm)).

    ``sources`` maps each alias in ``relations`` to its base relation name.
    """

    relations: frozenset[str]
    predicates: frozenset[Predicate]
    projection: tuple[ColumnRef, ...]
    sources: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "relations", frozenset(self.relations))
        object.__setattr__(self, "predicates", frozenset(self.predicates))
        object.__setattr__(self, "projection", tuple(self.projection))
        src = self.sources
        if isinstance(src, dict):
            src = src.items()
        object.__setattr__(self, "sources", tuple(sorted(src)))
        for p in self.predicates:
            if not p.relations <= self.relations:
                raise UnknownRelation(f"predicate {p} references relations outside the query")
        for c in self.projection:
            if c.rel not in self.relations:
                raise UnknownRelation(f"projection column {c} references a relation outside the query")

    @property
    def source_map(self) -> dict[str, str]:
        return dict(self.sources)

    def as_subquery(self) -> Subquery:
        return Subquery(self.relations, self.predicates)

    def order(self) -> list[str]:
        """Deterministic relation order, used for history bitmaps."""
        return sorted(self.relations)

    def __str__(self) -> str:
        return normal_form_text(self)


def normal_form_text(q: SPJQuery) -> str:
    proj = ", ".join(str(c) for c in q.projection)
    product = " × ".join(sorted(q.relations))
    if q.predicates:
        return f"Π[{proj}](σ[{format_predicates(q.predicates)}]({product}))"
    return f"Π[{proj}]({product})"


# -- equality closure -------------------------------------------------------------

class EqualityClosure:
    """Transitive closure of column-column equalities (union-find over columns)."""

    def __init__(self, predicates: Iterable[Predicate] = ()):
        self._sets = DisjointSet()
        for p in predicates:
            if p.is_equijoin:
                self.add(p.left, p.right)

    def add(self, a: ColumnRef, b: ColumnRef) -> None:
        self._sets.add(a)
        self._sets.add(b)
        self._sets.merge(a, b)

    def equal(self, a: ColumnRef, b: ColumnRef) -> bool:
        if a == b:
            return True
        return a in self._sets and b in self._sets and self._sets.connected(a, b)

    def implies(self, p: Predicate) -> bool:
        return p.is_equijoin and self.equal(p.left, p.right)

    def classes(self) -> list[list[ColumnRef]]:
        return [sorted(s) for s in self._sets.subsets() if len(s) > 1]


def covers(subqueries: Iterable[Subquery], q: SPJQuery) -> bool:
    """True iff the subqueries' relations union to R and their predicates imply S."""
    subqueries = list(subqueries)
    rels = frozenset().union(*(s.relations for s in subqueries)) if subqueries else frozenset()
    if rels != q.relations:
        return False
    preds = frozenset().union(*(s.predicates for s in subqueries)) if subqueries else frozenset()
    closure = EqualityClosure(preds)
    return all(p in preds or closure.implies(p) for p in q.predicates)


def implied_only(subqueries: Iterable[Subquery], q: SPJQuery) -> list[Predicate]:
    """Predicates of ``q`` absent from every subquery but recovered by transitivity."""
    preds = frozenset().union(*(s.predicates for s in subqueries))
    closure = EqualityClosure(preds)
    return sorted((p for p in q.predicates if p not in preds and closure.implies(p)), key=str)


@dataclass
class JoinGraph:
    vertices: list[str]
    edges: list[tuple[str, str, Predicate]]

    def components(self) -> list[frozenset[str]]:
        ds = DisjointSet(self.vertices)
        for a, b, _ in self.edges:
            ds.merge(a, b)
        return sorted((frozenset(s) for s in ds.subsets()), key=lambda s: sorted(s))


def join_graph(q: SPJQuery | Subquery) -> JoinGraph:
    edges = []
    for p in sorted(q.predicates, key=str):
        if p.is_colcol and p.left.rel != p.right.rel:
            edges.append((p.left.rel, p.right.rel, p))
    return JoinGraph(sorted(q.relations), edges)


# -- relational algebra tree -------------------------------------------------------

@dataclass(frozen=True)
class RelationNode:
    alias: str
    base: str


@dataclass(frozen=True)
class SelectNode:
    predicates: tuple[Predicate, ...]
    child: "Node"


@dataclass(frozen=True)
class ProjectNode:
    columns: tuple[ColumnRef, ...]
    child: "Node"


@dataclass(frozen=True)
class JoinNode:
    left: "Node"
    right: "Node"
    predicates: tuple[Predicate, ...] = ()


@dataclass(frozen=True)
class ProductNode:
    left: "Node"
    right: "Node"


Node = Union[RelationNode, SelectNode, ProjectNode, JoinNode, ProductNode]


@dataclass
class ParsedSelect:
    """Output of :func:`parse`: an algebra tree plus the catalog it was resolved against."""

    tree: Node
    catalog: Catalog


def _columns_of(node: Node, catalog: Catalog) -> tuple[ColumnRef, ...]:
    if isinstance(node, RelationNode):
        return tuple(ColumnRef(node.alias, f"{node.alias}.{a}") for a in catalog.defs[node.base].attribute_names)
    if isinstance(node, ProjectNode):
        return node.columns
    if isinstance(node, SelectNode):
        return _columns_of(node.child, catalog)
    return _columns_of(node.left, catalog) + _columns_of(node.right, catalog)


def normalize(tree: Node | ParsedSelect, catalog: Catalog | None = None) -> SPJQuery:
    """Rewrite an SPJ algebra tree into Π_P(σ_S(r1 × … × rm)).

    Joins become selections over products, selections are pulled above
    products, and projections are pulled to the top.
    """
    if isinstance(tree, ParsedSelect):
        catalog = tree.catalog
        tree = tree.tree
    if catalog is None:
        raise ValueError("normalize needs the catalog the tree was built against")
    rels: dict[str, str] = {}
    preds: set[Predicate] = set()

    def walk(node: Node) -> tuple[ColumnRef, ...]:
        if isinstance(node, RelationNode):
            if node.alias in rels:
                raise UnsupportedFeature(f"alias {node.alias!r} used twice")
            if node.base not in catalog:
                raise UnknownRelation(node.base)
            rels[node.alias] = node.base
            return _columns_of(node, catalog)
        if isinstance(node, SelectNode):
            visible = walk(node.child)
            names = set(visible)
            for p in node.predicates:
                for c in p.columns:
                    if c not in names:
                        raise UnknownAttribute(f"{c} is not visible to selection {p}")
            preds.update(node.predicates)
            return visible
        if isinstance(node, ProjectNode):
            visible = set(walk(node.child))
            for c in node.columns:
                if c not in visible:
                    raise UnknownAttribute(f"{c} is not visible to projection")
            return node.columns
        if isinstance(node, JoinNode):
            cols = walk(node.left) + walk(node.right)
            names = set(cols)
            for p in node.predicates:
                for c in p.columns:
                    if c not in names:
                        raise UnknownAttribute(f"{c} is not visible to join predicate {p}")
            preds.update(node.predicates)
            return cols
        if isinstance(node, ProductNode):
            return walk(node.left) + walk(node.right)
        raise TypeError(f"not an algebra node: {node!r}")

    projection = walk(tree)
    preds = {annotate_fk(p, rels, catalog) for p in preds}
    return SPJQuery(frozenset(rels), frozenset(preds), projection, rels)


def annotate_fk(p: Predicate, sources: dict[str, str], catalog: Catalog) -> Predicate:
    """Flag a column equality that joins a declared foreign key to its target key."""
    if not p.is_equijoin or p.left.rel == p.right.rel:
        return p
    for x, y in ((p.left, p.right), (p.right, p.left)):
        if x.rel not in sources or y.rel not in sources:
            continue
        fk = catalog.foreign_key(sources[x.rel], x.attr)
        if fk and fk.ref_relation == sources[y.rel] and fk.ref_column == y.attr:
            return Predicate(p.left, p.op, p.right, True, x.rel)
    return Predicate(p.left, p.op, p.right, False, None)


# -- parser ----------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>'(?:[^']|'')*')
  | (?P<number>-?\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|<>|!=|=|<|>)
  | (?P<punct>[,.*();])
    """,
    re.VERBOSE,
)

_UNSUPPORTED_KEYWORDS = {
    "GROUP": "GROUP BY",
    "HAVING": "HAVING",
    "ORDER": "ORDER BY",
    "LIMIT": "LIMIT",
    "UNION": "UNION",
    "INTERSECT": "INTERSECT",
    "EXCEPT": "EXCEPT",
    "OR": "OR predicates",
    "NOT": "NOT",
    "LEFT": "outer joins",
    "RIGHT": "outer joins",
    "FULL": "outer joins",
    "OUTER": "outer joins",
    "DISTINCT": "DISTINCT",
    "IN": "IN lists and semi-joins",
    "EXISTS": "EXISTS subqueries",
    "LIKE": "LIKE",
    "BETWEEN": "BETWEEN",
    "IS": "NULL tests",
    "COUNT": "aggregation",
    "SUM": "aggregation",
    "MIN": "aggregation",
    "MAX": "aggregation",
    "AVG": "aggregation",
}
_RESERVED = {"SELECT", "FROM", "WHERE", "AND", "JOIN", "INNER", "ON", "AS"} | set(_UNSUPPORTED_KEYWORDS)


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int

    @property
    def upper(self) -> str:
        return self.text.upper()


def _tokenize(sql: str) -> list[_Tok]:
    out = []
    pos = 0
    while pos < len(sql):
        m = _TOKEN_RE.match(sql, pos)
        if not m:
            raise SQLSyntaxError(pos, f"unexpected character {sql[pos]!r}")
        kind = m.lastgroup
        if kind != "ws":
            out.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    out.append(_Tok("eof", "", len(sql)))
    return out


class _Parser:
    def __init__(self, sql: str, catalog: Catalog):
        self.sql = sql
        self.catalog = catalog
        self.toks = _tokenize(sql)
        self.i = 0
        self.aliases: dict[str, str] = {}

    # token helpers
    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def advance(self) -> _Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def at_keyword(self, *words: str) -> bool:
        return self.tok.kind == "ident" and self.tok.upper in words

    def expect_keyword(self, word: str) -> None:
        if not self.at_keyword(word):
            self.fail(f"expected {word}")
        self.advance()

    def expect_punct(self, ch: str) -> None:
        if not (self.tok.kind == "punct" and self.tok.text == ch):
            self.fail(f"expected {ch!r}")
        self.advance()

    def at_punct(self, ch: str) -> bool:
        return self.tok.kind == "punct" and self.tok.text == ch

    def fail(self, msg: str):
        got = self.tok.text or "end of input"
        raise SQLSyntaxError(self.tok.pos, f"{msg}, got {got!r}")

    def check_unsupported(self) -> None:
        if self.tok.kind == "ident" and self.tok.upper in _UNSUPPORTED_KEYWORDS:
            feature = _UNSUPPORTED_KEYWORDS[self.tok.upper]
            raise UnsupportedFeature(
                f"{feature} at position {self.tok.pos} is outside the SPJ subset "
                "(non-SPJ queries are future work)"
            )

    def identifier(self, what: str) -> str:
        self.check_unsupported()
        if self.tok.kind != "ident" or self.tok.upper in _RESERVED:
            self.fail(f"expected {what}")
        return self.advance().text

    # grammar
    def parse(self) -> Node:
        self.check_unsupported()
        self.expect_keyword("SELECT")
        self.check_unsupported()
        select_items = self.select_list()
        self.expect_keyword("FROM")
        tree = self.from_list()
        where: list[Predicate] = []
        if self.at_keyword("WHERE"):
            self.advance()
            where = self.condition()
        self.check_unsupported()
        if self.at_punct(";"):
            self.advance()
        if self.tok.kind != "eof":
            self.check_unsupported()
            self.fail("expected end of statement")
        if where:
            tree = SelectNode(tuple(where), tree)
        columns = self.resolve_select_list(select_items)
        return ProjectNode(columns, tree)

    def select_list(self):
        items = []
        while True:
            if self.at_punct("*"):
                items.append(("*", None, self.advance().pos))
            else:
                pos = self.tok.pos
                if self.at_punct("("):
                    raise UnsupportedFeature(f"expressions at position {pos} are outside the SPJ subset")
                first = self.identifier("column")
                if self.at_punct("("):
                    raise UnsupportedFeature(f"function call {first}() at position {pos} is outside the SPJ subset")
                if self.at_punct("."):
                    self.advance()
                    if self.at_punct("*"):
                        self.advance()
                        items.append(("alias*", first, pos))
                    else:
                        items.append(("col", (first, self.identifier("attribute")), pos))
                else:
                    items.append(("col", (None, first), pos))
            if self.at_punct(","):
                self.advance()
                continue
            return items

    def from_list(self) -> Node:
        tree = self.from_item()
        while self.at_punct(","):
            self.advance()
            tree = ProductNode(tree, self.from_item())
        return tree

    def from_item(self) -> Node:
        tree = self.table_ref()
        while True:
            self.check_unsupported()
            if self.at_keyword("INNER"):
                self.advance()
                self.check_unsupported()
                if not self.at_keyword("JOIN"):
                    self.fail("expected JOIN")
            if self.at_keyword("JOIN"):
                self.advance()
                right = self.table_ref()
                self.expect_keyword("ON")
                preds = self.condition()
                tree = JoinNode(tree, right, tuple(preds))
            else:
                return tree

    def table_ref(self) -> Node:
        if self.at_punct("("):
            raise UnsupportedFeature(f"subselect at position {self.tok.pos} is outside the SPJ subset")
        pos = self.tok.pos
        name = self.identifier("relation name")
        if name not in self.catalog:
            raise UnknownRelation(f"{name} (position {pos})")
        alias = name
        if self.at_keyword("AS"):
            self.advance()
            alias = self.identifier("alias")
        elif self.tok.kind == "ident" and self.tok.upper not in _RESERVED:
            alias = self.advance().text
        if alias in self.aliases:
            raise SQLSyntaxError(pos, f"duplicate alias {alias!r}")
        self.aliases[alias] = name
        return RelationNode(alias, name)

    def condition(self) -> list[Predicate]:
        preds = []
        while True:
            if self.at_punct("("):
                self.advance()
                preds.extend(self.condition())
                self.expect_punct(")")
            else:
                preds.append(self.comparison())
            self.check_unsupported()
            if self.at_keyword("AND"):
                self.advance()
                continue
            return preds

    def operand(self):
        self.check_unsupported()
        t = self.tok
        if t.kind == "number":
            self.advance()
            return ("const", int(t.text), t.pos)
        if t.kind == "string":
            self.advance()
            return ("const", t.text[1:-1].replace("''", "'"), t.pos)
        if t.kind == "punct" and t.text == "(":
            raise UnsupportedFeature(f"subselect or expression at position {t.pos} is outside the SPJ subset")
        first = self.identifier("column or constant")
        if self.at_punct("."):
            self.advance()
            return ("col", self.resolve_column(first, self.identifier("attribute"), t.pos), t.pos)
        return ("col", self.resolve_column(None, first, t.pos), t.pos)

    def comparison(self) -> Predicate:
        left = self.operand()
        self.check_unsupported()
        if self.tok.kind != "op":
            self.fail("expected comparison operator")
        op = self.advance().text
        right = self.operand()
        if left[0] == "const" and right[0] == "const":
            raise UnsupportedFeature(f"constant-only comparison at position {left[2]}")
        if left[0] == "const":
            left, right, op = right, left, MIRROR["<>" if op == "!=" else op]
        col: ColumnRef = left[1]
        ltype = self.column_type(col)
        if right[0] == "const":
            value = right[1]
            if (ltype == INT64) != isinstance(value, int):
                raise TypeMismatch(-1, str(col), value)
            if ltype == STRING and op in RANGE_OPS:
                raise UnsupportedFeature(f"range predicate on string column {col}")
            return make_predicate(col, op, value)
        other: ColumnRef = right[1]
        if self.column_type(other) != ltype:
            raise TypeMismatch(-1, f"{col} vs {other}", op)
        return make_predicate(col, op, other)

    def column_type(self, c: ColumnRef) -> str:
        return self.catalog.defs[self.aliases[c.rel]].attribute(c.attr).datatype

    def resolve_column(self, alias: str | None, attr: str, pos: int) -> ColumnRef:
        if alias is not None:
            if alias not in self.aliases:
                raise UnknownRelation(f"{alias} (position {pos})")
            if attr not in self.catalog.defs[self.aliases[alias]].attribute_names:
                raise UnknownAttribute(f"{alias}.{attr} (position {pos})")
            return ColumnRef(alias, f"{alias}.{attr}")
        hits = [a for a, base in self.aliases.items() if attr in self.catalog.defs[base].attribute_names]
        if len(hits) != 1:
            what = "ambiguous" if hits else "unknown"
            raise UnknownAttribute(f"{what} attribute {attr!r} (position {pos})")
        return ColumnRef(hits[0], f"{hits[0]}.{attr}")

    def resolve_select_list(self, items) -> tuple[ColumnRef, ...]:
        out: list[ColumnRef] = []
        for kind, val, pos in items:
            if kind == "*":
                for alias, base in self.aliases.items():
                    out.extend(ColumnRef(alias, f"{alias}.{a}") for a in self.catalog.defs[base].attribute_names)
            elif kind == "alias*":
                if val not in self.aliases:
                    raise UnknownRelation(f"{val} (position {pos})")
                out.extend(ColumnRef(val, f"{val}.{a}") for a in self.catalog.defs[self.aliases[val]].attribute_names)
            else:
                out.append(self.resolve_column(val[0], val[1], pos))
        return tuple(out)


def parse(sql: str, catalog: Catalog) -> ParsedSelect:
    """Parse one SELECT of the supported subset into an algebra tree."""
    return ParsedSelect(_Parser(sql, catalog).parse(), catalog)


def parse_query(sql: str, catalog: Catalog) -> SPJQuery:
    """``normalize(parse(sql))``."""
    return normalize(parse(sql, catalog))


def to_sql(q: SPJQuery) -> str:
    src = q.source_map
    frm = ", ".join(a if src.get(a, a) == a else f"{src[a]} AS {a}" for a in sorted(q.relations))
    sql = f"SELECT {', '.join(str(c) for c in q.projection)} FROM {frm}"
    if q.predicates:
        sql += " WHERE " + format_predicates(q.predicates)
    return sql
