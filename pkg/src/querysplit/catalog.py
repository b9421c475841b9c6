"""Relations, schemas, foreign keys, temp-table materialization and memory accounting.

Base relations live in a :class:`Catalog` and are immutable once loaded.
Materialized subquery results live in a per-session :class:`TempSpace`, which
charges every temp table against a :class:`MemoryBudget`.

Accounted row size: 8 bytes per int64, ``len + 8`` bytes per string, plus a
16 byte row overhead.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

from .errors import (
    DanglingForeignKey,
    DuplicatePrimaryKey,
    DuplicateRelation,
    MemoryExceeded,
    MissingColumn,
    NotFound,
    NotMaterialized,
    SchemaParseError,
    TypeMismatch,
)

INT64 = "int64"
STRING = "string"
DATATYPES = (INT64, STRING)

ROW_OVERHEAD = 16
INT_BYTES = 8
STRING_HEADER = 8

MiB = 1 << 20
DEFAULT_TEST_BUDGET = 64 * MiB
DEFAULT_BENCH_BUDGET = 512 * MiB

_INT_MIN, _INT_MAX = -(1 << 63), (1 << 63) - 1


@dataclass(frozen=True)
class AttributeDef:
    name: str
    datatype: str = INT64
    nullable: bool = False

    def __post_init__(self):
        if self.datatype not in DATATYPES:
            raise ValueError(f"unsupported datatype {self.datatype!r}")
        if self.nullable:
            raise ValueError("nullable attributes are not supported")


@dataclass(frozen=True)
class ForeignKey:
    column: str
    ref_relation: str
    ref_column: str


@dataclass(frozen=True)
class RelationDef:
    name: str
    attributes: tuple[AttributeDef, ...]
    primary_key: str | None = None
    foreign_keys: tuple[ForeignKey, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "foreign_keys", tuple(self.foreign_keys))
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate attribute names in {self.name!r}")
        if self.primary_key is not None and self.primary_key not in names:
            raise MissingColumn(f"{self.name}: primary key {self.primary_key!r} is not an attribute")
        for fk in self.foreign_keys:
            if fk.column not in names:
                raise MissingColumn(f"{self.name}: foreign key column {fk.column!r} is not an attribute")

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def attribute(self, name: str) -> AttributeDef:
        for a in self.attributes:
            if a.name == name:
                return a
        raise MissingColumn(f"{self.name} has no attribute {name!r}")


def row_bytes(row: Sequence, types: Sequence[str]) -> int:
    size = ROW_OVERHEAD
    for value, t in zip(row, types):
        size += INT_BYTES if t == INT64 else len(value) + STRING_HEADER
    return size


def rows_bytes(rows: Iterable[Sequence], types: Sequence[str]) -> int:
    types = list(types)
    if all(t == INT64 for t in types):
        n = sum(1 for _ in rows)
        return n * (ROW_OVERHEAD + INT_BYTES * len(types))
    return sum(row_bytes(r, types) for r in rows)


@dataclass(eq=False)
class StoredRelation:
    """A relation held in memory as a list of tuples."""

    defn: RelationDef
    rows: list[tuple]
    kind: str = "base"
    byte_size: int = 0
    pk_sorted: bool = False

    @property
    def name(self) -> str:
        return self.defn.name

    @property
    def columns(self) -> tuple[str, ...]:
        return self.defn.attribute_names

    @property
    def types(self) -> tuple[str, ...]:
        return tuple(a.datatype for a in self.defn.attributes)

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise MissingColumn(f"{self.name} has no column {name!r}") from None

    def __len__(self) -> int:
        return len(self.rows)

    def scan(self) -> Iterator[tuple]:
        return iter(self.rows)


@dataclass
class MemoryBudget:
    limit_bytes: int
    used_bytes: int = 0
    peak_bytes: int = 0

    @property
    def available(self) -> int:
        return self.limit_bytes - self.used_bytes

    def charge(self, name: str, nbytes: int) -> None:
        if nbytes > self.available:
            raise MemoryExceeded(name, nbytes, self.available)
        self.used_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.used_bytes)

    def release(self, nbytes: int) -> None:
        if nbytes > self.used_bytes:
            raise ValueError("releasing more bytes than are in use")
        self.used_bytes -= nbytes


class Catalog:
    """Base relations, their foreign-key metadata, static statistics and indexes.

    Everything in a catalog is read-only after loading, so one catalog can
    back any number of query sessions.
    """

    def __init__(self, defs: Iterable[RelationDef] = ()):
        self.defs: dict[str, RelationDef] = {}
        for d in defs:
            if d.name in self.defs:
                raise DuplicateRelation(d.name)
            self.defs[d.name] = d
        for d in self.defs.values():
            for fk in d.foreign_keys:
                target = self.defs.get(fk.ref_relation)
                if target is None or target.primary_key != fk.ref_column:
                    raise DanglingForeignKey(
                        f"{d.name}.{fk.column} -> {fk.ref_relation}.{fk.ref_column}"
                    )
        self.relations: dict[str, StoredRelation] = {
            name: StoredRelation(d, [], "base") for name, d in self.defs.items()
        }
        self._stats: dict = {}
        self._indexes: dict[tuple[str, str], dict] = {}

    def __contains__(self, name: str) -> bool:
        return name in self.defs

    def __len__(self) -> int:
        return len(self.defs)

    def __getitem__(self, name: str) -> StoredRelation:
        try:
            return self.relations[name]
        except KeyError:
            raise NotFound(name) from None

    # -- metadata -----------------------------------------------------------

    def foreign_key(self, relation: str, column: str) -> ForeignKey | None:
        for fk in self.defs[relation].foreign_keys:
            if fk.column == column:
                return fk
        return None

    def referenced_relations(self) -> set[str]:
        return {fk.ref_relation for d in self.defs.values() for fk in d.foreign_keys}

    def is_entity(self, relation: str) -> bool:
        return relation in self.referenced_relations()

    def fk_count(self, relation: str) -> int:
        return len(self.defs[relation].foreign_keys)

    def indexed_columns(self, relation: str) -> set[str]:
        d = self.defs[relation]
        cols = {fk.column for fk in d.foreign_keys}
        if d.primary_key is not None:
            cols.add(d.primary_key)
        return cols

    def index(self, relation: str, column: str) -> dict:
        """Value -> list of row positions. Built lazily, cached for the catalog's lifetime."""
        key = (relation, column)
        idx = self._indexes.get(key)
        if idx is None:
            if column not in self.indexed_columns(relation):
                raise NotFound(f"no index on {relation}.{column}")
            rel = self.relations[relation]
            pos = rel.column_index(column)
            idx = {}
            for i, row in enumerate(rel.rows):
                idx.setdefault(row[pos], []).append(i)
            self._indexes[key] = idx
        return idx

    # -- loading ------------------------------------------------------------

    def load_rows(self, relation: str, rows: Iterable[Sequence]) -> int:
        rel = self[relation]
        d = rel.defn
        types = rel.types
        out = []
        for i, row in enumerate(rows):
            row = tuple(row)
            if len(row) != len(types):
                raise TypeMismatch(i, "*", row)
            for v, a in zip(row, d.attributes):
                if a.datatype == INT64:
                    if not isinstance(v, int) or isinstance(v, bool) or not _INT_MIN <= v <= _INT_MAX:
                        raise TypeMismatch(i, a.name, v)
                elif not isinstance(v, str):
                    raise TypeMismatch(i, a.name, v)
            out.append(row)
        self._install(rel, out)
        return len(out)

    def load_csv(self, relation: str, path: str | Path) -> int:
        rel = self[relation]
        d = rel.defn
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise MissingColumn(f"{path}: empty file, no header row") from None
            header = [h.strip() for h in header]
            missing = [a for a in d.attribute_names if a not in header]
            if missing:
                raise MissingColumn(f"{path}: missing column(s) {missing}")
            extra = [h for h in header if h not in d.attribute_names]
            if extra:
                raise MissingColumn(f"{path}: unexpected column(s) {extra}")
            order = [header.index(a) for a in d.attribute_names]
            types = rel.types
            out = []
            for i, rec in enumerate(reader):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise TypeMismatch(i, "*", rec)
                row = []
                for pos, t, name in zip(order, types, d.attribute_names):
                    raw = rec[pos]
                    if t == INT64:
                        try:
                            v = int(raw)
                        except ValueError:
                            raise TypeMismatch(i, name, raw) from None
                        if not _INT_MIN <= v <= _INT_MAX:
                            raise TypeMismatch(i, name, raw)
                        row.append(v)
                    else:
                        row.append(raw)
                out.append(tuple(row))
        self._install(rel, out)
        return len(out)

    def _install(self, rel: StoredRelation, rows: list[tuple]) -> None:
        pk = rel.defn.primary_key
        sorted_on_pk = False
        if pk is not None:
            pos = rel.column_index(pk)
            keys = [r[pos] for r in rows]
            if len(set(keys)) != len(keys):
                raise DuplicatePrimaryKey(f"{rel.name}.{pk}")
            sorted_on_pk = all(a < b for a, b in zip(keys, keys[1:]))
        rel.rows = rows
        rel.pk_sorted = sorted_on_pk
        rel.byte_size = rows_bytes(rows, rel.types)
        self._stats.pop(rel.name, None)
        for key in [k for k in self._indexes if k[0] == rel.name]:
            del self._indexes[key]

    def stats(self, relation: str):
        """Static (ANALYZE) statistics of a base relation, computed on first use."""
        from .stats import analyze

        s = self._stats.get(relation)
        if s is None:
            s = self._stats[relation] = analyze(self[relation])
        return s

    def analyze_all(self) -> None:
        for name in self.defs:
            self.stats(name)


def define_schema(defs: Iterable[RelationDef]) -> Catalog:
    return Catalog(defs)


def materialize(
    name: str,
    rows: Iterable[Sequence],
    schema: Sequence[AttributeDef],
    budget: MemoryBudget,
) -> StoredRelation:
    """Drain ``rows`` into a new materialized relation, charging ``budget``.

    Raises :class:`MemoryExceeded` as soon as the accounted size would pass
    the remaining budget; the budget is left untouched in that case.
    """
    schema = tuple(schema)
    types = [a.datatype for a in schema]
    available = budget.available
    stored = []
    size = 0
    if all(t == INT64 for t in types):
        per_row = ROW_OVERHEAD + INT_BYTES * len(types)
        for row in rows:
            size += per_row
            if size > available:
                raise MemoryExceeded(name, size, available)
            stored.append(tuple(row))
    else:
        for row in rows:
            size += row_bytes(row, types)
            if size > available:
                raise MemoryExceeded(name, size, available)
            stored.append(tuple(row))
    budget.charge(name, size)
    return StoredRelation(RelationDef(name, schema), stored, "materialized", size)


class TempSpace:
    """Session-private namespace for materialized temp tables and their runtime stats."""

    def __init__(self, catalog: Catalog, budget: MemoryBudget | None = None):
        self.catalog = catalog
        self.budget = budget if budget is not None else MemoryBudget(DEFAULT_TEST_BUDGET)
        self.temps: dict[str, StoredRelation] = {}
        self.runtime_stats: dict = {}

    def materialize(self, name, rows, schema, budget: MemoryBudget | None = None) -> StoredRelation:
        if name in self.temps or name in self.catalog:
            raise DuplicateRelation(name)
        rel = materialize(name, rows, schema, budget or self.budget)
        self.temps[name] = rel
        return rel

    def drop_materialized(self, name: str, budget: MemoryBudget | None = None) -> int:
        if name not in self.temps:
            if name in self.catalog:
                raise NotMaterialized(name)
            raise NotFound(name)
        rel = self.temps.pop(name)
        self.runtime_stats.pop(name, None)
        (budget or self.budget).release(rel.byte_size)
        return rel.byte_size

    def drop_all(self) -> int:
        return sum(self.drop_materialized(n) for n in list(self.temps))

    def get(self, name: str) -> StoredRelation:
        if name in self.temps:
            return self.temps[name]
        return self.catalog[name]

    def live_bytes(self) -> int:
        return sum(r.byte_size for r in self.temps.values())


# -- schema file --------------------------------------------------------------

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_BLOCK_RE = re.compile(rf"^relation\s+({_IDENT})\s*$")
_KV_RE = re.compile(r"^(\w+)\s*=\s*(.*)$")
_ATTR_RE = re.compile(rf"^({_IDENT})\s*:\s*(\w+)$")
_FK_RE = re.compile(rf"^({_IDENT})\s*->\s*({_IDENT})\s*\.\s*({_IDENT})$")


def parse_schema(text: str) -> list[RelationDef]:
    """Parse the schema-file format described in ``docs/schema_format.md``."""
    blocks: list[dict] = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _BLOCK_RE.match(line)
        if m:
            current = {"name": m.group(1), "line": lineno, "attrs": None, "pk": None, "fks": []}
            blocks.append(current)
            continue
        m = _KV_RE.match(line)
        if not m:
            raise SchemaParseError(lineno, f"expected 'relation NAME' or 'key = value', got {line!r}")
        if current is None:
            raise SchemaParseError(lineno, "key-value line outside a relation block")
        key, value = m.group(1), m.group(2).strip()
        if key == "attributes":
            if current["attrs"] is not None:
                raise SchemaParseError(lineno, "attributes given twice")
            attrs = []
            for item in _split_list(value):
                am = _ATTR_RE.match(item)
                if not am:
                    raise SchemaParseError(lineno, f"bad attribute {item!r}, expected name:type")
                if am.group(2) not in DATATYPES:
                    raise SchemaParseError(lineno, f"unknown type {am.group(2)!r}")
                attrs.append(AttributeDef(am.group(1), am.group(2)))
            if not attrs:
                raise SchemaParseError(lineno, "empty attribute list")
            names = [a.name for a in attrs]
            if len(set(names)) != len(names):
                raise SchemaParseError(lineno, "duplicate attribute name")
            current["attrs"] = attrs
            current["attrs_line"] = lineno
        elif key == "primary_key":
            if not re.fullmatch(_IDENT, value):
                raise SchemaParseError(lineno, f"bad primary key {value!r}")
            current["pk"] = (value, lineno)
        elif key == "foreign_keys":
            for item in _split_list(value):
                fm = _FK_RE.match(item)
                if not fm:
                    raise SchemaParseError(lineno, f"bad foreign key {item!r}, expected col -> rel.col")
                current["fks"].append((ForeignKey(*fm.groups()), lineno))
        else:
            raise SchemaParseError(lineno, f"unknown key {key!r}")

    defs = []
    seen: dict[str, int] = {}
    for b in blocks:
        if b["name"] in seen:
            raise SchemaParseError(b["line"], f"relation {b['name']!r} already defined on line {seen[b['name']]}")
        seen[b["name"]] = b["line"]
        if b["attrs"] is None:
            raise SchemaParseError(b["line"], f"relation {b['name']!r} has no attributes line")
        names = {a.name for a in b["attrs"]}
        pk = None
        if b["pk"] is not None:
            pk, line = b["pk"]
            if pk not in names:
                raise SchemaParseError(line, f"primary key {pk!r} is not an attribute")
        for fk, line in b["fks"]:
            if fk.column not in names:
                raise SchemaParseError(line, f"foreign key column {fk.column!r} is not an attribute")
        defs.append(RelationDef(b["name"], tuple(b["attrs"]), pk, tuple(fk for fk, _ in b["fks"])))

    by_name = {d.name: d for d in defs}
    for b, d in zip(blocks, defs):
        for fk, line in b["fks"]:
            target = by_name.get(fk.ref_relation)
            if target is None or target.primary_key != fk.ref_column:
                raise SchemaParseError(
                    line, f"foreign key target {fk.ref_relation}.{fk.ref_column} is not a primary key"
                )
    return defs


def _split_list(value: str) -> list[str]:
    return [part.strip() for part in value.split(",") if part.strip()]


def format_schema(defs: Iterable[RelationDef]) -> str:
    out = []
    for d in defs:
        out.append(f"relation {d.name}")
        out.append("  attributes = " + ", ".join(f"{a.name}:{a.datatype}" for a in d.attributes))
        if d.primary_key:
            out.append(f"  primary_key = {d.primary_key}")
        if d.foreign_keys:
            out.append(
                "  foreign_keys = "
                + ", ".join(f"{fk.column} -> {fk.ref_relation}.{fk.ref_column}" for fk in d.foreign_keys)
            )
        out.append("")
    return "\n".join(out)


def load_schema(path: str | Path) -> list[RelationDef]:
    return parse_schema(Path(path).read_text(encoding="utf-8"))


def load_dataset(data_dir: str | Path, schema_file: str = "schema.txt") -> Catalog:
    """Load ``schema.txt`` plus one ``<relation>.csv`` per relation from a directory."""
    data_dir = Path(data_dir)
    catalog = Catalog(load_schema(data_dir / schema_file))
    for name in catalog.defs:
        path = data_dir / f"{name}.csv"
        if path.exists():
            catalog.load_csv(name, path)
    return catalog
