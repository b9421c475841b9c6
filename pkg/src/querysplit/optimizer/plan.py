"""Physical plan trees."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

from ..query import ColumnRef, Predicate, format_predicates

SCAN_KINDS = ("SeqScan", "IndexScan")
JOIN_KINDS = ("NestedLoopJoin", "HashJoin", "MergeJoin", "DirectmapJoin")
KEYED_JOINS = ("HashJoin", "MergeJoin", "DirectmapJoin")


@dataclass(eq=False)
class PlanNode:
    kind: str
    children: tuple["PlanNode", ...] = ()
    est_rows: float = 0.0
    est_cost: float = 0.0
    own_cost: float = 0.0
    relations: frozenset[str] = frozenset()
    columns: tuple[str, ...] = ()
    relation: str | None = None
    filters: tuple[Predicate, ...] = ()
    keys: tuple[tuple[ColumnRef, ColumnRef], ...] = ()
    index_column: ColumnRef | None = None
    index_value: object = None
    index_matches: float | None = None
    base_rows: float = 0.0
    presorted: tuple[bool, bool] = (False, False)
    output: tuple[ColumnRef, ...] = ()
    mask: int = 0
    true_rows: int | None = None
    true_matches: int | None = None
    _ser: str | None = field(default=None, repr=False)

    @property
    def is_leaf(self) -> bool:
        return self.kind in SCAN_KINDS

    @property
    def is_join(self) -> bool:
        return self.kind in JOIN_KINDS

    @property
    def outer(self) -> "PlanNode":
        return self.children[0]

    @property
    def inner(self) -> "PlanNode":
        return self.children[1]

    def walk(self) -> Iterator["PlanNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def leaves(self) -> list["PlanNode"]:
        return [n for n in self.walk() if n.is_leaf]

    def height(self) -> int:
        if not self.children:
            return 0
        return 1 + max(c.height() for c in self.children)

    def serialize(self) -> str:
        """Canonical text of the plan's shape; ignores estimates."""
        if self._ser is None:
            if self.is_leaf:
                s = f"{self.kind}({self.relation}"
                if self.index_column is not None:
                    s += f"@{self.index_column.name}"
                if self.filters:
                    s += "|" + format_predicates(self.filters)
                s += ")"
            else:
                s = self.kind
                if self.keys:
                    s += "[" + ",".join(f"{a.name}={b.name}" for a, b in self.keys) + "]"
                if self.filters:
                    s += "{" + format_predicates(self.filters) + "}"
                if self.output:
                    s += "<" + ",".join(c.name for c in self.output) + ">"
                s += "(" + ",".join(c.serialize() for c in self.children) + ")"
            self._ser = s
        return self._ser

    def label(self) -> str:
        if self.is_leaf:
            s = f"{self.kind} {self.relation}"
            if self.index_column is not None:
                s += f" using {self.index_column.name}"
            if self.filters:
                s += f"  filter: {format_predicates(self.filters)}"
            return s
        s = self.kind
        if self.keys:
            s += " [" + " AND ".join(f"{a} = {b}" for a, b in self.keys) + "]"
        if self.filters:
            s += f"  filter: {format_predicates(self.filters)}"
        if self.kind == "Project":
            s += " " + ", ".join(c.name for c in self.output)
        return s

    def explain(self, analyze: bool = False, indent: int = 0) -> str:
        lines: list[str] = []
        self._explain(lines, analyze, indent)
        return "\n".join(lines)

    def _explain(self, lines, analyze, indent):
        stats = f"rows={self.est_rows:.0f} cost={self.est_cost:.2f}"
        if analyze and self.true_rows is not None:
            stats += f" actual={self.true_rows}"
        lines.append("  " * indent + ("-> " if indent else "") + f"{self.label()}  ({stats})")
        for c in self.children:
            c._explain(lines, analyze, indent + 1)
