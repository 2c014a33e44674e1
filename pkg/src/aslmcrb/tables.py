"""Rectangular result tables and RFC-4180-style CSV emission.

Numbers are written with 9 significant digits and '.' decimal separator;
invalid cells carry the literal sentinel NA.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ColumnMissing, IoFailure

NA = "NA"


@dataclass
class ExperimentTable:
    """Named numeric columns; None/NaN cells become the NA sentinel."""

    columns: list[str]
    rows: list[list] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("duplicate column names")
        for i, row in enumerate(self.rows):
            if len(row) != len(self.columns):
                raise ValueError(
                    f"row {i} has {len(row)} cells, expected {len(self.columns)}")

    def add_row(self, values: dict) -> None:
        row = []
        for name in self.columns:
            if name not in values:
                raise ColumnMissing(f"row is missing column {name!r}")
            row.append(values[name])
        self.rows.append(row)

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise ColumnMissing(f"no column {name!r}; have {self.columns}") from None

    def column(self, name: str) -> list:
        i = self.column_index(name)
        return [row[i] for row in self.rows]


def _format_cell(value) -> str:
    if value is None:
        return NA
    if isinstance(value, str):
        return value
    x = float(value)
    if math.isnan(x):
        return NA
    return f"{x:.9g}"


def emit_table(table: ExperimentTable, path) -> None:
    """Write the table as CSV (comma separated, CRLF, 9 significant digits)."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([_format_cell(v) for v in row])
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def read_table(path) -> ExperimentTable:
    """Parse a CSV written by emit_table; NA cells become None."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row]
    if not rows:
        raise IoFailure(f"{path} is empty")
    columns = rows[0]
    parsed = []
    for row in rows[1:]:
        out = []
        for cell in row:
            if cell == NA:
                out.append(None)
            else:
                try:
                    out.append(float(cell))
                except ValueError:
                    out.append(cell)
        parsed.append(out)
    return ExperimentTable(columns=columns, rows=parsed)


def column_array(table: ExperimentTable, name: str) -> np.ndarray:
    """Column as float array with None mapped to NaN."""
    return np.array([np.nan if v is None else float(v)
                     for v in table.column(name)])
