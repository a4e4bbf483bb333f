"""AFC trip records: parsing, entry-interval binning and per-cell aggregation."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

AFC_COLUMNS = ("card_id", "entry_station", "exit_station", "entry_time_min", "exit_time_min")
TABLE_COLUMNS = ("origin", "destination", "interval", "mean_travel_min", "count")

DROP_NON_POSITIVE = "non-positive travel"
DROP_SAME_OD = "equal OD"
DROP_UNKNOWN_STATION = "unknown station"
DROP_MALFORMED = "malformed"


class CorruptInputError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class AfcRecord:
    card_id: str
    origin: int
    destination: int
    entry_time_min: float
    exit_time_min: float

    @property
    def travel_min(self) -> float:
        return self.exit_time_min - self.entry_time_min

    @property
    def od(self) -> tuple[int, int]:
        return (self.origin, self.destination)


@dataclass(frozen=True)
class IntervalSpec:
    start_min: float = 420.0
    width_min: float = 30.0
    count: int = 10

    def __post_init__(self):
        if not self.width_min > 0:
            raise ValueError("interval width must be positive")
        if self.count < 1:
            raise ValueError("interval count must be positive")

    @property
    def end_min(self) -> float:
        return self.start_min + self.count * self.width_min

    def bounds(self, h: int) -> tuple[float, float]:
        return (self.start_min + h * self.width_min, self.start_min + (h + 1) * self.width_min)


def bin_interval(entry_time_min: float, spec: IntervalSpec) -> int | None:
    """Index of the half-open interval holding ``entry_time_min``; None outside the window."""
    h = math.floor((entry_time_min - spec.start_min) / spec.width_min)
    if 0 <= h < spec.count:
        return h
    return None


@dataclass
class ParseReport:
    total: int = 0
    kept: int = 0
    dropped: Counter = field(default_factory=Counter)

    def to_json(self) -> dict:
        return {"total": self.total, "kept": self.kept, "dropped": dict(sorted(self.dropped.items()))}


def _open_text(stream):
    if isinstance(stream, (str, Path)):
        return open(stream, newline=""), True
    return stream, False


def iter_afc(
    stream,
    known_station: Callable[[int], bool] | None = None,
    canonical: Callable[[int], int] | None = None,
    report: ParseReport | None = None,
) -> Iterator[AfcRecord]:
    """Stream valid records from a CSV path or text stream.

    Invalid rows are skipped and tallied in ``report`` by reason. Accepts the
    time columns as ``entry_time``/``exit_time`` as well.
    """
    report = report if report is not None else ParseReport()
    fh, owned = _open_text(stream)
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return
        except (csv.Error, UnicodeDecodeError) as exc:
            raise CorruptInputError(f"unreadable AFC stream: {exc}") from exc
        names = [h.strip() for h in header]
        alias = {"entry_time": "entry_time_min", "exit_time": "exit_time_min"}
        names = [alias.get(n, n) for n in names]
        try:
            pos = [names.index(c) for c in AFC_COLUMNS]
        except ValueError:
            raise CorruptInputError(f"AFC header must contain {', '.join(AFC_COLUMNS)}; got {header}") from None
        i_card, i_o, i_d, i_in, i_out = pos
        try:
            for row in reader:
                if not row:
                    continue
                report.total += 1
                try:
                    o, d = int(row[i_o]), int(row[i_d])
                    t_in, t_out = float(row[i_in]), float(row[i_out])
                except (ValueError, IndexError):
                    report.dropped[DROP_MALFORMED] += 1
                    continue
                if known_station is not None and not (known_station(o) and known_station(d)):
                    report.dropped[DROP_UNKNOWN_STATION] += 1
                    continue
                if canonical is not None:
                    o, d = canonical(o), canonical(d)
                if o == d:
                    report.dropped[DROP_SAME_OD] += 1
                    continue
                if not t_out - t_in > 0 or not math.isfinite(t_out - t_in):
                    report.dropped[DROP_NON_POSITIVE] += 1
                    continue
                report.kept += 1
                yield AfcRecord(row[i_card], o, d, t_in, t_out)
        except (csv.Error, UnicodeDecodeError) as exc:
            raise CorruptInputError(f"unreadable AFC stream: {exc}") from exc
    finally:
        if owned:
            fh.close()


def parse_afc(stream, known_station=None, canonical=None, max_invalid_fraction: float = 0.5):
    """Parse all records; returns ``(records, report)``.

    Raises CorruptInputError when more than ``max_invalid_fraction`` of the
    data rows are invalid.
    """
    report = ParseReport()
    records = list(iter_afc(stream, known_station, canonical, report))
    check_corruption(report, max_invalid_fraction)
    return records, report


def check_corruption(report: ParseReport, max_invalid_fraction: float = 0.5) -> None:
    if report.total and (report.total - report.kept) / report.total > max_invalid_fraction:
        raise CorruptInputError(
            f"corrupt input: {report.total - report.kept} of {report.total} rows invalid")


def write_afc(records: Iterable[AfcRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AFC_COLUMNS)
        for r in records:
            w.writerow([r.card_id, r.origin, r.destination, repr(r.entry_time_min), repr(r.exit_time_min)])


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class Cell:
    mean_travel_min: float
    count: int
    imputed: bool = False


@dataclass
class ObservationTable:
    rows: dict[tuple[int, int, int], Cell]
    interval_spec: IntervalSpec = field(default_factory=IntervalSpec)
    out_of_window: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    def keys(self) -> list[tuple[int, int, int]]:
        return sorted(self.rows)

    def ods(self) -> list[tuple[int, int]]:
        return sorted({(o, d) for o, d, _ in self.rows})

    def total_count(self) -> int:
        return sum(c.count for c in self.rows.values())

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObservationTable):
            return NotImplemented
        return self.rows == other.rows and self.interval_spec == other.interval_spec


class _Accumulator:
    """Running (sum, count) per (origin, destination, interval) cell."""

    def __init__(self, spec: IntervalSpec, keep_values: bool = False):
        self.spec = spec
        self.sums: dict[tuple[int, int, int], list] = {}
        self.values: dict[tuple[int, int, int], list[float]] | None = {} if keep_values else None
        self.out_of_window = 0

    def add(self, rec: AfcRecord) -> None:
        h = bin_interval(rec.entry_time_min, self.spec)
        if h is None:
            self.out_of_window += 1
            return
        key = (rec.origin, rec.destination, h)
        tt = rec.exit_time_min - rec.entry_time_min
        acc = self.sums.get(key)
        if acc is None:
            self.sums[key] = [tt, 1]
        else:
            acc[0] += tt
            acc[1] += 1
        if self.values is not None:
            self.values.setdefault(key, []).append(tt)

    def merge(self, other: "_Accumulator") -> None:
        for key, (s, n) in other.sums.items():
            acc = self.sums.setdefault(key, [0.0, 0])
            acc[0] += s
            acc[1] += n
        self.out_of_window += other.out_of_window


def aggregate(
    records: Iterable[AfcRecord],
    spec: IntervalSpec = IntervalSpec(),
    trim_percentiles: tuple[float, float] | None = None,
) -> ObservationTable:
    """Mean travel time and record count per (origin, destination, interval) cell.

    One pass; memory grows with the number of active cells, not records.
    ``trim_percentiles=(p_lo, p_hi)`` drops each cell's travel times outside
    those percentiles first, which needs the per-cell values kept in memory.
    """
    acc = _Accumulator(spec, keep_values=trim_percentiles is not None)
    for rec in records:
        acc.add(rec)
    if trim_percentiles is None:
        rows = {k: Cell(s / n, n) for k, (s, n) in sorted(acc.sums.items())}
    else:
        lo, hi = trim_percentiles
        rows = {}
        for k in sorted(acc.values):
            v = np.asarray(acc.values[k])
            a, b = np.percentile(v, [lo, hi])
            v = v[(v >= a) & (v <= b)]
            rows[k] = Cell(float(v.mean()), int(v.size))
    return ObservationTable(rows, spec, acc.out_of_window)


def table_csv(table: ObservationTable, with_imputed: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS + (("imputed",) if with_imputed else ()))
    for (o, d, h) in table.keys():
        c = table.rows[(o, d, h)]
        row = [o, d, h, repr(c.mean_travel_min), c.count]
        if with_imputed:
            row.append(int(c.imputed))
        w.writerow(row)
    return buf.getvalue()


def write_table(table: ObservationTable, path, with_imputed: bool = False) -> None:
    Path(path).write_text(table_csv(table, with_imputed))


def read_table(path, spec: IntervalSpec = IntervalSpec()) -> ObservationTable:
    rows = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            key = (int(r["origin"]), int(r["destination"]), int(r["interval"]))
            rows[key] = Cell(float(r["mean_travel_min"]), int(r["count"]), bool(int(r.get("imputed") or 0)))
    return ObservationTable(rows, spec)


def write_summary(report: ParseReport, table: ObservationTable, path) -> None:
    doc = {"parse": report.to_json(), "cells": len(table), "records_in_window": table.total_count(),
           "out_of_window": table.out_of_window}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def table_from_mapping(cells: Mapping[tuple[int, int, int], tuple[float, int]],
                       spec: IntervalSpec = IntervalSpec()) -> ObservationTable:
    return ObservationTable({k: Cell(float(m), int(n)) for k, (m, n) in sorted(cells.items())}, spec)
