"""Table and column statistics: MCV lists, equi-depth histograms, distinct counts."""

from __future__ import annotations

import bisect
from collections import Counter
from dataclasses import dataclass, field
from typing import Any

from .catalog import INT64, StoredRelation

MCV_SIZE = 10
HISTOGRAM_BUCKETS = 20


@dataclass(frozen=True)
class ColumnStats:
    n_distinct: int
    mcv: tuple[tuple[Any, float], ...] = ()
    histogram: tuple[int, ...] = ()
    min_value: Any = None
    max_value: Any = None
    datatype: str = INT64

    def __post_init__(self):
        freqs = dict(self.mcv)
        object.__setattr__(self, "_mcv_map", freqs)
        object.__setattr__(self, "_mcv_mass", sum(freqs.values()))

    @property
    def mcv_mass(self) -> float:
        return self._mcv_mass

    def mcv_frequency(self, value) -> float | None:
        return self._mcv_map.get(value)

    @property
    def remainder_frequency(self) -> float:
        """Frequency of each value outside the MCV list under a uniform remainder."""
        rest = self.n_distinct - len(self.mcv)
        if rest <= 0:
            return 0.0
        return max(0.0, 1.0 - self._mcv_mass) / rest


@dataclass(frozen=True)
class TableStats:
    row_count: int
    columns: dict[str, ColumnStats] = field(default_factory=dict)
    exact: bool = True

    def renamed(self, mapping: dict[str, str]) -> "TableStats":
        return TableStats(
            self.row_count,
            {mapping[c]: s for c, s in self.columns.items() if c in mapping},
            self.exact,
        )


def column_stats(values: list, datatype: str = INT64,
                 mcv_size: int = MCV_SIZE, buckets: int = HISTOGRAM_BUCKETS) -> ColumnStats:
    n = len(values)
    counts = Counter(values)
    # descending frequency, ties by ascending value so the output is deterministic
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    mcv = tuple((v, c / n) for v, c in ranked[:mcv_size])
    histogram: tuple = ()
    if datatype == INT64 and len(ranked) > mcv_size:
        rest = sorted(v for v, c in ranked[mcv_size:] for _ in range(c))
        histogram = equi_depth_boundaries(rest, buckets)
    return ColumnStats(
        n_distinct=len(counts),
        mcv=mcv,
        histogram=histogram,
        min_value=min(counts),
        max_value=max(counts),
        datatype=datatype,
    )


def equi_depth_boundaries(sorted_values: list, buckets: int) -> tuple:
    n = len(sorted_values)
    if n == 0:
        return ()
    buckets = max(1, min(buckets, n))
    return tuple(sorted_values[(i * (n - 1)) // buckets] for i in range(buckets + 1))


def analyze(relation: StoredRelation, columns: list[str] | None = None) -> TableStats:
    """Full-scan statistics of a stored relation."""
    rows = relation.rows
    if not rows:
        return TableStats(0, {}, True)
    names = relation.columns
    types = relation.types
    wanted = set(columns) if columns is not None else None
    out = {}
    for pos, (name, t) in enumerate(zip(names, types)):
        if wanted is not None and name not in wanted:
            continue
        out[name] = column_stats([r[pos] for r in rows], t)
    return TableStats(len(rows), out, True)


def frequency(stats: ColumnStats, value) -> float:
    """Estimated fraction of rows whose column equals ``value``."""
    f = stats.mcv_frequency(value)
    if f is not None:
        return f
    return stats.remainder_frequency


def histogram_fraction_below(histogram: tuple, c) -> float:
    """Fraction of histogram mass strictly below ``c`` (linear within a bucket)."""
    if not histogram:
        return 0.0
    nb = len(histogram) - 1
    if nb == 0:
        return 1.0 if c > histogram[0] else 0.0
    if c <= histogram[0]:
        return 0.0
    if c > histogram[-1]:
        return 1.0
    total = 0.0
    i = bisect.bisect_left(histogram, c) - 1
    # buckets entirely below c
    total = float(max(i, 0))
    lo, hi = histogram[i], histogram[i + 1]
    if hi > lo:
        total += (c - lo) / (hi - lo)
    elif c > hi:
        total += 1.0
    return min(1.0, total / nb)


def range_fraction(stats: ColumnStats, op: str, c) -> float:
    """Selectivity of ``column op c`` for int64 columns: exact MCV mass plus histogram."""
    if op in ("<=", ">"):
        below = _fraction_lt(stats, c + 1)
        return below if op == "<=" else 1.0 - below
    below = _fraction_lt(stats, c)
    return below if op == "<" else 1.0 - below


def _fraction_lt(stats: ColumnStats, c) -> float:
    mcv_part = sum(f for v, f in stats.mcv if v < c)
    rest = max(0.0, 1.0 - stats.mcv_mass)
    if rest > 0:
        if stats.histogram:
            mcv_part += rest * histogram_fraction_below(stats.histogram, c)
        elif stats.min_value is not None and stats.max_value is not None and stats.max_value > stats.min_value:
            frac = (c - stats.min_value) / (stats.max_value - stats.min_value)
            mcv_part += rest * min(1.0, max(0.0, frac))
    return min(1.0, max(0.0, mcv_part))


def collect_runtime_stats(m: StoredRelation, space) -> TableStats:
    """Analyze a freshly materialized relation and register the result in ``space``."""
    s = analyze(m)
    space.runtime_stats[m.name] = s
    return s
