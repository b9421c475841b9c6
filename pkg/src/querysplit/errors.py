"""Exception hierarchy shared by every module of the engine."""

from __future__ import annotations


class QuerySplitError(Exception):
    """Base class for all engine errors."""


# catalog / storage

class DuplicateRelation(QuerySplitError):
    pass


class DanglingForeignKey(QuerySplitError):
    pass


class SchemaParseError(QuerySplitError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class TypeMismatch(QuerySplitError):
    def __init__(self, row: int, column: str, value: object = None):
        super().__init__(f"row {row}, column {column!r}: cannot parse {value!r}")
        self.row = row
        self.column = column


class DuplicatePrimaryKey(QuerySplitError):
    pass


class MissingColumn(QuerySplitError):
    pass


class MemoryExceeded(QuerySplitError):
    def __init__(self, name: str, needed: int, available: int):
        super().__init__(
            f"materializing {name!r} needs {needed} bytes, only {available} available"
        )
        self.name = name
        self.needed = needed
        self.available = available


class NotFound(QuerySplitError):
    pass


class NotMaterialized(QuerySplitError):
    pass


# query model

class SQLSyntaxError(QuerySplitError):
    def __init__(self, position: int, message: str):
        super().__init__(f"syntax error at position {position}: {message}")
        self.position = position


class UnknownRelation(QuerySplitError):
    pass


class UnknownAttribute(QuerySplitError):
    pass


class UnsupportedFeature(QuerySplitError):
    pass


# optimizer / executor

class SingularSystem(QuerySplitError):
    pass


class NegativeKey(QuerySplitError):
    pass


class KeyOverflow(QuerySplitError):
    pass


class NoContainingSubquery(QuerySplitError):
    pass
