"""Iterator-model execution of physical plans.

Every operator follows the open/next/close protocol and additionally
supports plain Python iteration.  Rows are tuples laid out as the plan
node's ``columns``; a join emits ``outer_row + inner_row``.  Each operator
writes the number of rows it produced into its plan node's ``true_rows``
when it is closed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from operator import itemgetter
from typing import Iterable, Iterator, Mapping, Sequence

from .catalog import AttributeDef, Catalog, StoredRelation, TempSpace
from .errors import KeyOverflow, MissingColumn, NegativeKey
from .optimizer.estimate import BoundRelation
from .optimizer.plan import PlanNode
from .query import ColumnRef, Predicate, make_predicate

NA = -1
MAX_MAP_SIZE = 1 << 24

_PY_OPS = {"=": "==", "<": "<", "<=": "<=", ">": ">", ">=": ">=", "<>": "!="}


def compile_predicates(preds: Sequence[Predicate], layout: Mapping[str, int]):
    """Turn a conjunction into a single row -> bool callable (None when empty)."""
    if not preds:
        return None
    env: dict[str, object] = {}
    terms = []
    for k, p in enumerate(preds):
        try:
            left = f"r[{layout[p.left.name]}]"
            if isinstance(p.right, ColumnRef):
                right = f"r[{layout[p.right.name]}]"
            else:
                env[f"c{k}"] = p.right
                right = f"c{k}"
        except KeyError as e:
            raise MissingColumn(f"column {e.args[0]} is not available for {p}") from None
        terms.append(f"{left} {_PY_OPS[p.op]} {right}")
    return eval(f"lambda r: {' and '.join(terms)}", env)  # noqa: S307 - source built from column positions only


def key_getter(positions: Sequence[int]):
    return itemgetter(*positions)


# -- directmap ------------------------------------------------------------------

class DirectMap:
    """Array-shaped hash table addressed directly by an int64 key.

    Row ``x`` either is empty, hosts the first tuple whose key is ``x``, or
    holds a guest: a further tuple of some key chained behind that key's
    host through ``prev``/``next`` links.  A guest is evicted to the lowest
    empty row when a tuple with key equal to the guest's row index arrives.
    """

    def __init__(self, max_size: int = MAX_MAP_SIZE):
        self.max_size = max_size
        self.valid: list[bool] = []
        self.prev: list[int] = []
        self.next: list[int] = []
        self.slot: list = []
        self.keys: list[int] = []
        self._tail: list[int] = []  # per host row: index of its chain's last row
        self._cursor = 0  # no row below this index is empty
        self.size = 0

    def __len__(self) -> int:
        return self.size

    @property
    def capacity(self) -> int:
        return len(self.valid)

    def _grow(self, needed: int) -> None:
        cap = self.capacity
        if needed <= cap:
            return
        new = max(needed, 2 * cap, 8)
        extra = new - cap
        self.valid.extend([False] * extra)
        self.prev.extend([NA] * extra)
        self.next.extend([NA] * extra)
        self.slot.extend([None] * extra)
        self.keys.extend([NA] * extra)
        self._tail.extend([NA] * extra)

    def reserve(self, rows: int, max_key: int) -> None:
        """Pre-size for ``rows`` tuples whose largest key is ``max_key``."""
        if max_key >= self.max_size:
            raise KeyOverflow(max_key)
        self._grow(max(rows, max_key + 1))

    def _empty_row(self) -> int:
        c = self._cursor
        valid = self.valid
        cap = len(valid)
        while c < cap and valid[c]:
            c += 1
        if c == cap:
            self._grow(c + 1)
        self._cursor = c
        return c

    def insert(self, key: int, tup) -> None:
        if key < 0:
            raise NegativeKey(key)
        if key >= self.max_size:
            raise KeyOverflow(key)
        if key >= len(self.valid):
            self._grow(key + 1)
        self.size += 1
        if not self.valid[key]:
            self._put(key, key, tup, NA, NA)
            self._tail[key] = key
        elif self.prev[key] == NA:
            # occupied by this key's host: append a guest at the chain tail
            g = self._empty_row()
            tail = self._tail[key]
            self._put(g, key, tup, tail, NA)
            self.next[tail] = g
            self._tail[key] = g
        else:
            # occupied by a guest of another key: move it out, then host here
            g = self._empty_row()
            owner = self.keys[key]
            p, n = self.prev[key], self.next[key]
            self._put(g, owner, self.slot[key], p, n)
            self.next[p] = g
            if n != NA:
                self.prev[n] = g
            else:
                self._tail[owner] = g
            self._put(key, key, tup, NA, NA)
            self._tail[key] = key

    def _put(self, row: int, key: int, tup, prev: int, nxt: int) -> None:
        self.valid[row] = True
        self.keys[row] = key
        self.slot[row] = tup
        self.prev[row] = prev
        self.next[row] = nxt

    def chain(self, key) -> list:
        """Inner tuples whose key equals ``key``: the host first, then its guests."""
        if key < 0 or key >= len(self.valid) or not self.valid[key] or self.prev[key] != NA:
            return []
        out = []
        nxt, slot = self.next, self.slot
        r = key
        while r != NA:
            out.append(slot[r])
            r = nxt[r]
        return out

    def probe(self, key) -> Iterator:
        return iter(self.chain(key))

    def validate(self) -> None:
        """Assert every structural invariant; raises AssertionError on violation."""
        reached = set()
        for x in range(self.capacity):
            if not self.valid[x]:
                assert self.slot[x] is None and self.prev[x] == NA and self.next[x] == NA, f"dirty empty row {x}"
                continue
            if self.prev[x] != NA:
                assert self.valid[self.prev[x]] and self.next[self.prev[x]] == x, f"broken back link at {x}"
                continue
            assert self.keys[x] == x, f"host row {x} holds key {self.keys[x]}"
            r = x
            while r != NA:
                assert r not in reached, f"row {r} reached twice"
                reached.add(r)
                assert self.keys[r] == x, f"row {r} chained under key {x} holds {self.keys[r]}"
                n = self.next[r]
                if n != NA:
                    assert self.prev[n] == r, f"next/prev mismatch between {r} and {n}"
                else:
                    assert self._tail[x] == r, f"stale tail pointer for key {x}"
                r = n
        assert len(reached) == sum(self.valid) == self.size, "unreachable or miscounted rows"
        assert all(self.valid[:self._cursor]), "cursor skipped an empty row"


def directmap_build(inner: Iterable, key_pos: int, max_size: int = MAX_MAP_SIZE) -> DirectMap:
    """Build a map over ``inner``; same placement as repeated ``insert`` calls, inlined for speed."""
    m = DirectMap(max_size)
    rows = list(inner)
    if not rows:
        return m
    keys = [r[key_pos] for r in rows]
    lo, hi = min(keys), max(keys)
    if lo < 0:
        raise NegativeKey(lo)
    m.reserve(len(rows), hi)
    valid, prev, nxt, slot, kcol, tail = m.valid, m.prev, m.next, m.slot, m.keys, m._tail
    cursor = 0
    for key, row in zip(keys, rows):
        if not valid[key]:
            valid[key] = True
            kcol[key] = key
            slot[key] = row
            tail[key] = key
            continue
        while valid[cursor]:
            cursor += 1
        g = cursor
        valid[g] = True
        if prev[key] == NA:
            t = tail[key]
            kcol[g] = key
            slot[g] = row
            prev[g] = t
            nxt[t] = g
            tail[key] = g
        else:
            owner = kcol[key]
            p, n = prev[key], nxt[key]
            kcol[g] = owner
            slot[g] = slot[key]
            prev[g] = p
            nxt[g] = n
            nxt[p] = g
            if n != NA:
                prev[n] = g
            else:
                tail[owner] = g
            kcol[key] = key
            slot[key] = row
            prev[key] = NA
            nxt[key] = NA
            tail[key] = key
    m._cursor = cursor
    m.size = len(rows)
    return m


def directmap_probe(m: DirectMap, outer: Iterable, key_pos: int) -> Iterator[tuple]:
    valid, prev, nxt, slot = m.valid, m.prev, m.next, m.slot
    cap = len(valid)
    for o in outer:
        r = o[key_pos]
        if r < 0 or r >= cap or not valid[r] or prev[r] != NA:
            continue
        while r != NA:
            yield o + slot[r]
            r = nxt[r]


# -- operators ------------------------------------------------------------------

class Operator:
    """Base iterator.  Subclasses implement :meth:`_produce`."""

    def __init__(self, node: PlanNode, children: Sequence["Operator"] = ()):
        self.node = node
        self.children = tuple(children)
        self.layout = {c: i for i, c in enumerate(node.columns)}
        self.count = 0
        self._it: Iterator | None = None
        self._done = False

    def open(self) -> None:
        self.count = 0
        self._done = False
        self._it = self._counted()

    def next(self):
        """Next row, or None at end of stream (and forever after)."""
        if self._it is None or self._done:
            return None
        row = next(self._it, None)
        if row is None:
            self._done = True
        return row

    def close(self) -> None:
        if self._it is not None:
            self._it.close()
            self._it = None
        self.node.true_rows = self.count

    def __iter__(self) -> Iterator[tuple]:
        self.open()
        try:
            yield from self._it
        finally:
            self.close()

    def _counted(self) -> Iterator[tuple]:
        n = 0
        try:
            for row in self._produce():
                n += 1
                yield row
        finally:
            self.count = n

    def _produce(self) -> Iterator[tuple]:
        raise NotImplementedError


class SeqScan(Operator):
    def __init__(self, node, stored: StoredRelation):
        super().__init__(node)
        self.stored = stored
        self.pred = compile_predicates(node.filters, self.layout)

    def _produce(self):
        if self.pred is None:
            return iter(self.stored.rows)
        return filter(self.pred, self.stored.rows)


class IndexScan(Operator):
    def __init__(self, node, stored: StoredRelation, index: Mapping):
        super().__init__(node)
        self.stored = stored
        self.index = index
        rest = [p for p in node.filters if not (p.left == node.index_column and p.op == "="
                                                and p.right == node.index_value)]
        self.pred = compile_predicates(rest, self.layout)

    def _produce(self):
        positions = self.index.get(self.node.index_value, ())
        self.node.true_matches = len(positions)
        rows = self.stored.rows
        found = (rows[i] for i in positions)
        return found if self.pred is None else filter(self.pred, found)


class _Join(Operator):
    def __init__(self, node, outer: Operator, inner: Operator):
        super().__init__(node, (outer, inner))
        self.outer, self.inner = outer, inner
        self.pred = compile_predicates(node.filters, self.layout)
        self.okey = key_getter([outer.layout[a.name] for a, _ in node.keys]) if node.keys else None
        self.ikey = key_getter([inner.layout[b.name] for _, b in node.keys]) if node.keys else None


class NestedLoopJoin(_Join):
    def __init__(self, node, outer, inner):
        super().__init__(node, outer, inner)
        preds = [make_predicate(a, "=", b) for a, b in node.keys] + list(node.filters)
        self.pred = compile_predicates(preds, self.layout)

    def _produce(self):
        inner = list(self.inner)
        pred = self.pred
        for o in self.outer:
            if pred is None:
                for i in inner:
                    yield o + i
            else:
                for i in inner:
                    r = o + i
                    if pred(r):
                        yield r


class HashJoin(_Join):
    def _produce(self):
        table: dict = {}
        ikey = self.ikey
        for i in self.inner:
            table.setdefault(ikey(i), []).append(i)
        okey, pred = self.okey, self.pred
        get = table.get
        for o in self.outer:
            matches = get(okey(o))
            if matches:
                for i in matches:
                    r = o + i
                    if pred is None or pred(r):
                        yield r


class MergeJoin(_Join):
    def _produce(self):
        okey, ikey, pred = self.okey, self.ikey, self.pred
        outer = list(self.outer)
        inner = list(self.inner)
        if not self.node.presorted[0]:
            outer.sort(key=okey)
        if not self.node.presorted[1]:
            inner.sort(key=ikey)
        i = 0
        n_inner = len(inner)
        for o in outer:
            k = okey(o)
            while i < n_inner and ikey(inner[i]) < k:
                i += 1
            # i is the mark; rewind to it for every outer row with this key
            j = i
            while j < n_inner and ikey(inner[j]) == k:
                r = o + inner[j]
                if pred is None or pred(r):
                    yield r
                j += 1


class DirectmapJoin(_Join):
    def __init__(self, node, outer, inner, max_size: int = MAX_MAP_SIZE):
        super().__init__(node, outer, inner)
        if len(node.keys) != 1:
            raise ValueError("directmap join needs exactly one key")
        self.opos = outer.layout[node.keys[0][0].name]
        self.ipos = inner.layout[node.keys[0][1].name]
        self.max_size = max_size
        self.map: DirectMap | None = None

    def _produce(self):
        self.map = directmap_build(self.inner, self.ipos, self.max_size)
        pred = self.pred
        for r in directmap_probe(self.map, self.outer, self.opos):
            if pred is None or pred(r):
                yield r


class Project(Operator):
    def __init__(self, node, child: Operator):
        super().__init__(node, (child,))
        self.child = child
        self.get = key_getter([child.layout[c.name] for c in node.output]) if node.output else None

    def _produce(self):
        g = self.get
        if g is None:
            return (() for _ in self.child)
        if len(self.node.output) == 1:
            return ((g(r),) for r in self.child)
        return (g(r) for r in self.child)


class Materialize(Operator):
    """Drains its child into a temp table, then streams the stored rows."""

    def __init__(self, node, child: Operator, space: TempSpace, types: Sequence[str]):
        super().__init__(node, (child,))
        self.child = child
        self.space = space
        self.schema = [AttributeDef(c, t) for c, t in zip(node.columns, types)]
        self.stored: StoredRelation | None = None

    def _produce(self):
        self.stored = self.space.materialize(self.node.relation, iter(self.child), self.schema)
        return iter(self.stored.rows)


# -- entry points -----------------------------------------------------------------

@dataclass
class ExecEnv:
    """What operators need to find their inputs."""

    bindings: Mapping[str, BoundRelation]
    catalog: Catalog | None = None
    space: TempSpace | None = None
    max_map_size: int = MAX_MAP_SIZE
    operators: list = field(default_factory=list)


def build(plan: PlanNode, env: ExecEnv) -> Operator:
    k = plan.kind
    if k == "SeqScan":
        op = SeqScan(plan, env.bindings[plan.relation].stored)
    elif k == "IndexScan":
        b = env.bindings[plan.relation]
        op = IndexScan(plan, b.stored, env.catalog.index(b.base, plan.index_column.attr))
    elif k in ("NestedLoopJoin", "HashJoin", "MergeJoin", "DirectmapJoin"):
        o = build(plan.children[0], env)
        i = build(plan.children[1], env)
        if k == "DirectmapJoin":
            op = DirectmapJoin(plan, o, i, env.max_map_size)
        else:
            op = {"NestedLoopJoin": NestedLoopJoin, "HashJoin": HashJoin, "MergeJoin": MergeJoin}[k](plan, o, i)
    elif k == "Project":
        op = Project(plan, build(plan.children[0], env))
    elif k == "Materialize":
        op = Materialize(plan, build(plan.children[0], env), env.space, plan_types(plan.children[0], env.bindings))
    else:
        raise ValueError(f"unknown plan node {k!r}")
    env.operators.append(op)
    return op


def plan_types(plan: PlanNode, bindings: Mapping[str, BoundRelation]) -> tuple[str, ...]:
    """Datatypes of the plan's output columns, in layout order."""
    if plan.is_leaf:
        return tuple(bindings[plan.relation].stored.types)
    if plan.kind == "Project":
        child = plan.children[0]
        types = dict(zip(child.columns, plan_types(child, bindings)))
        return tuple(types[c.name] for c in plan.output)
    return tuple(t for c in plan.children for t in plan_types(c, bindings))


def execute(plan: PlanNode, bindings: Mapping[str, BoundRelation], catalog: Catalog | None = None,
            space: TempSpace | None = None, max_map_size: int = MAX_MAP_SIZE) -> list[tuple]:
    """Run ``plan`` to completion; every node's ``true_rows`` is filled in."""
    root = build(plan, ExecEnv(bindings, catalog, space, max_map_size))
    return list(root)


def stream(plan: PlanNode, bindings: Mapping[str, BoundRelation], catalog: Catalog | None = None,
           space: TempSpace | None = None, max_map_size: int = MAX_MAP_SIZE) -> Iterator[tuple]:
    return iter(build(plan, ExecEnv(bindings, catalog, space, max_map_size)))


def materialize_with_pushdown(rows: Iterable[tuple], columns: Sequence[str], types: Sequence[str],
                              needed: Iterable[str], name: str, space: TempSpace) -> StoredRelation:
    """Store only the ``needed`` columns of ``rows`` (duplicates kept) as temp ``name``."""
    needed = set(needed)
    keep = [i for i, c in enumerate(columns) if c in needed]
    schema = [AttributeDef(columns[i], types[i]) for i in keep]
    if len(keep) == len(columns):
        src = rows
    elif not keep:
        src = (() for _ in rows)
    elif len(keep) == 1:
        k = keep[0]
        src = ((r[k],) for r in rows)
    else:
        g = itemgetter(*keep)
        src = (g(r) for r in rows)
    return space.materialize(name, src, schema)
