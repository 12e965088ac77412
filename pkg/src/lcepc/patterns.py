"""Binary response patterns and observed pattern counts.

Patterns are enumerated lexicographically with the last item varying
fastest, so the pattern at index ``r`` is the binary expansion of ``r``.
Counts are stored densely over all ``2**J`` patterns and may be
fractional (population proportions are fitted with the same machinery).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from os import PathLike
from typing import Iterable, Sequence

import numpy as np

MAX_ITEMS = 20


class DataError(ValueError):
    """Base class for problems with input data."""


class ParseError(DataError):
    """A cell could not be read as a binary response or a count."""


class SchemaError(DataError):
    """The input file does not have the expected columns."""


class ValidationError(DataError):
    """Values are well formed but violate a constraint (e.g. negative count)."""


@dataclass(frozen=True)
class PatternTable:
    """All ``2**n_items`` binary response patterns in canonical order."""

    n_items: int

    def __post_init__(self):
        if not 1 <= self.n_items <= MAX_ITEMS:
            raise ValueError(f"number of items must be in [1, {MAX_ITEMS}], got {self.n_items}")

    @property
    def n_patterns(self) -> int:
        return 1 << self.n_items

    @cached_property
    def patterns(self) -> np.ndarray:
        """(R, J) array of 0/1 responses; row ``r`` is the binary expansion of ``r``."""
        r = np.arange(self.n_patterns)
        shifts = np.arange(self.n_items - 1, -1, -1)
        out = ((r[:, None] >> shifts[None, :]) & 1).astype(np.int8)
        out.flags.writeable = False
        return out

    def index_of(self, pattern: Sequence[int]) -> int:
        if len(pattern) != self.n_items:
            raise ValueError(f"pattern has {len(pattern)} entries, expected {self.n_items}")
        idx = 0
        for v in pattern:
            if v not in (0, 1):
                raise ValueError(f"pattern entries must be 0 or 1, got {v!r}")
            idx = (idx << 1) | int(v)
        return idx

    def indices_of(self, responses: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`index_of` for an (n, J) 0/1 array."""
        responses = np.asarray(responses, dtype=np.int64)
        weights = 1 << np.arange(self.n_items - 1, -1, -1)
        return responses @ weights

    def pattern_at(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.n_patterns:
            raise IndexError(index)
        return tuple(int(v) for v in self.patterns[index])

    def __len__(self) -> int:
        return self.n_patterns

    def __iter__(self):
        return (tuple(int(v) for v in row) for row in self.patterns)


def enumerate_patterns(n_items: int) -> PatternTable:
    """Return the table of all binary patterns over ``n_items`` items."""
    return PatternTable(int(n_items))


@dataclass(frozen=True)
class ObservedData:
    """Pattern counts over the full pattern table.

    Attributes
    ----------
    table : PatternTable
    counts : ndarray
        Length-R nonnegative (possibly fractional) counts.
    item_names : tuple of str
        Item labels in file-column order.
    """

    table: PatternTable
    counts: np.ndarray
    item_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        counts = np.array(self.counts, dtype=float)
        if counts.shape != (self.table.n_patterns,):
            raise SchemaError(
                f"expected {self.table.n_patterns} counts for {self.table.n_items} items, got shape {counts.shape}"
            )
        if not np.all(np.isfinite(counts)):
            raise ValidationError("counts must be finite")
        if np.any(counts < 0):
            raise ValidationError(f"negative count at pattern index {int(np.argmax(counts < 0))}")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)
        names = tuple(self.item_names) or tuple(f"y{k + 1}" for k in range(self.table.n_items))
        if len(names) != self.table.n_items:
            raise SchemaError(f"{len(names)} item names for {self.table.n_items} items")
        object.__setattr__(self, "item_names", names)

    @property
    def n_items(self) -> int:
        return self.table.n_items

    @property
    def N(self) -> float:
        return float(self.counts.sum())

    def scaled(self, factor: float) -> "ObservedData":
        return ObservedData(self.table, self.counts * factor, self.item_names)


def from_counts(counts: Sequence[float], item_names: Iterable[str] = ()) -> ObservedData:
    """Wrap a full length-``2**J`` count vector."""
    counts = np.asarray(counts, dtype=float)
    n_items = int(round(np.log2(counts.size))) if counts.size else 0
    if counts.size == 0 or 1 << n_items != counts.size:
        raise SchemaError(f"count vector length {counts.size} is not a power of two")
    return ObservedData(enumerate_patterns(n_items), counts, tuple(item_names))


def from_responses(responses: np.ndarray, item_names: Iterable[str] = (),
                   weights: np.ndarray | None = None) -> ObservedData:
    """Aggregate an (n, J) array of 0/1 responses into pattern counts."""
    responses = np.asarray(responses)
    if responses.ndim != 2:
        raise SchemaError("responses must be a 2-d array")
    bad = ~np.isin(responses, (0, 1))
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ParseError(f"non-binary value {responses[row, col]!r} at row {row + 1}, column {col + 1}")
    table = enumerate_patterns(responses.shape[1])
    idx = table.indices_of(responses)
    counts = np.bincount(idx, weights=weights, minlength=table.n_patterns).astype(float)
    return ObservedData(table, counts, tuple(item_names))


def _parse_binary(cell: str, row: int, col: str) -> int:
    s = cell.strip()
    if s in ("0", "1"):
        return int(s)
    try:
        v = float(s)
    except ValueError:
        v = None
    if v in (0.0, 1.0):
        return int(v)
    raise ParseError(f"non-binary value {cell!r} at row {row}, column {col!r}")


def ingest(source: str | PathLike, mode: str = "raw") -> ObservedData:
    """Read a CSV file of responses.

    ``mode="raw"`` expects one row per observation with J binary columns.
    ``mode="aggregated"`` expects J pattern columns plus a ``count`` column;
    patterns may repeat (their counts are summed) and absent patterns get 0.
    """
    if mode not in ("raw", "aggregated"):
        raise ValueError(f"mode must be 'raw' or 'aggregated', got {mode!r}")
    with open(source, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{source}: empty file") from None
        rows = [(i, r) for i, r in enumerate(reader, start=2) if any(c.strip() for c in r)]

    if mode == "aggregated":
        if "count" not in header:
            raise SchemaError(f"{source}: aggregated input needs a 'count' column")
        count_col = header.index("count")
        item_cols = [j for j in range(len(header)) if j != count_col]
    else:
        count_col = None
        item_cols = list(range(len(header)))
    names = [header[j] for j in item_cols]
    if not 1 <= len(names) <= MAX_ITEMS:
        raise SchemaError(f"{source}: {len(names)} item columns, expected 1..{MAX_ITEMS}")

    responses = np.empty((len(rows), len(item_cols)), dtype=np.int8)
    weights = np.empty(len(rows))
    for k, (lineno, row) in enumerate(rows):
        if len(row) != len(header):
            raise SchemaError(f"{source}: row {lineno} has {len(row)} columns, header has {len(header)}")
        for m, j in enumerate(item_cols):
            responses[k, m] = _parse_binary(row[j], lineno, header[j])
        if count_col is None:
            weights[k] = 1.0
        else:
            try:
                w = float(row[count_col])
            except ValueError:
                raise ParseError(f"non-numeric count {row[count_col]!r} at row {lineno}") from None
            if not np.isfinite(w) or w < 0:
                raise ValidationError(f"invalid count {row[count_col]!r} at row {lineno}")
            weights[k] = w

    table = enumerate_patterns(len(item_cols))
    counts = np.bincount(table.indices_of(responses), weights=weights, minlength=table.n_patterns)
    data = ObservedData(table, counts, tuple(names))
    if data.N <= 0:
        raise ValidationError(f"{source}: total count is zero")
    return data


def write_aggregated(data: ObservedData, dest: str | PathLike, include_zero: bool = False) -> None:
    """Write pattern counts in the aggregated CSV layout read by :func:`ingest`."""
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(data.item_names) + ["count"])
        for r, pattern in enumerate(data.table.patterns):
            c = data.counts[r]
            if c == 0 and not include_zero:
                continue
            w.writerow([int(v) for v in pattern] + [repr(float(c)) if c != int(c) else int(c)])
