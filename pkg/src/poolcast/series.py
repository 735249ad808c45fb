"""Univariate series container, CSV ingestion and fixed-window splits."""

from __future__ import annotations

import csv
import datetime as _dt
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SeriesError(ValueError):
    """Invalid series data; ``row`` is the 1-based data row when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class ObservedSeries:
    """Ordered real observations with optional ISO-8601 dates.

    The values array is copied and made read-only, so instances can be shared
    freely.
    """

    values: np.ndarray
    timestamps: tuple[_dt.date, ...] | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float).ravel()
        if vals.size < 1:
            raise SeriesError("series is empty")
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise SeriesError("non-finite value", row=int(bad[0]) + 1)
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.timestamps is not None:
            ts = tuple(self.timestamps)
            if len(ts) != vals.size:
                raise SeriesError("timestamps and values differ in length")
            for i in range(1, len(ts)):
                if ts[i] <= ts[i - 1]:
                    raise SeriesError("dates not strictly increasing", row=i + 1)
            object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObservedSeries):
            return NotImplemented
        return (np.array_equal(self.values, other.values)
                and self.timestamps == other.timestamps)

    def __getitem__(self, idx: slice) -> "ObservedSeries":
        if not isinstance(idx, slice):
            raise TypeError("ObservedSeries supports slicing only")
        ts = None if self.timestamps is None else self.timestamps[idx]
        return ObservedSeries(self.values[idx], ts)


@dataclass(frozen=True)
class SampleSplit:
    """Fixed estimation window of ``in_sample_len`` followed by ``holdout_len``."""

    in_sample_len: int
    holdout_len: int

    def __post_init__(self):
        if int(self.in_sample_len) < 2:
            raise ValueError("in-sample length must be at least 2")
        if int(self.holdout_len) < 1:
            raise ValueError("holdout length must be at least 1")

    def validate(self, length: int) -> None:
        if self.in_sample_len + self.holdout_len > length:
            raise ValueError(
                f"split n={self.in_sample_len}, tau={self.holdout_len} exceeds "
                f"series length {length}")


def split(series: ObservedSeries, spec: SampleSplit) -> tuple[ObservedSeries, ObservedSeries]:
    """First ``n`` values and the ``tau`` values that follow them."""
    spec.validate(len(series))
    n, tau = spec.in_sample_len, spec.holdout_len
    return series[:n], series[n:n + tau]


def _parse_float(text: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise SeriesError(f"cannot parse value {text!r}", row=row) from None
    if not math.isfinite(value):
        raise SeriesError(f"non-finite value {text!r}", row=row)
    return value


def read_csv_text(text: str) -> ObservedSeries:
    reader = csv.reader(io.StringIO(text, newline=""))
    try:
        header = [h.strip().lower() for h in next(reader)]
    except StopIteration:
        raise SeriesError("empty file") from None
    if header == ["value"]:
        has_dates = False
    elif header == ["date", "value"]:
        has_dates = True
    else:
        raise SeriesError(f"header must be 'date,value' or 'value', got {','.join(header)!r}")

    values: list[float] = []
    dates: list[_dt.date] = []
    for i, rec in enumerate(reader, start=1):
        if not rec or all(not c.strip() for c in rec):
            raise SeriesError("blank row", row=i)
        if len(rec) != len(header):
            raise SeriesError(f"expected {len(header)} fields, got {len(rec)}", row=i)
        if has_dates:
            try:
                day = _dt.date.fromisoformat(rec[0].strip())
            except ValueError:
                raise SeriesError(f"bad ISO-8601 date {rec[0]!r}", row=i) from None
            if dates and day <= dates[-1]:
                raise SeriesError("dates not strictly increasing", row=i)
            dates.append(day)
        values.append(_parse_float(rec[-1].strip(), i))
    if len(values) < 2:
        raise SeriesError("need at least 2 observations")
    return ObservedSeries(np.array(values), tuple(dates) if has_dates else None)


def load_csv(path: str | Path) -> ObservedSeries:
    """Read a ``date,value`` or ``value`` CSV (UTF-8, LF or CRLF)."""
    with open(path, encoding="utf-8-sig", newline="") as fh:
        return read_csv_text(fh.read())


def format_value(x: float) -> str:
    return format(float(x), ".17g")


def write_csv(series: ObservedSeries, path: str | Path) -> None:
    """Write values at 17 significant digits, so a reload is exact."""
    lines = []
    if series.timestamps is None:
        lines.append("value")
        lines.extend(format_value(v) for v in series.values)
    else:
        lines.append("date,value")
        lines.extend(f"{d.isoformat()},{format_value(v)}"
                     for d, v in zip(series.timestamps, series.values))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
