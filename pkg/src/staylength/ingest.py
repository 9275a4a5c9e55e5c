"""Loading, validation, collapsing and phase labelling of booking rows."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from pathlib import Path
from typing import IO, Iterator, Sequence

import numpy as np

__all__ = [
    "Phase",
    "PhaseBoundaries",
    "DEFAULT_BOUNDARIES",
    "STAY_CAP",
    "BookingRecord",
    "BookingTable",
    "MonthlyPoint",
    "DataError",
    "assign_phase",
    "assign_phases",
    "load_bookings",
    "write_bookings",
    "write_provenance",
    "monthly_aggregate",
]

STAY_CAP = 180
HEADER = ("nights", "weight", "created_date")


class DataError(ValueError):
    """Input data cannot be parsed or is unusable."""


class Phase(str, Enum):
    PRE_COVID = "PreCovid"
    RESTRICTION = "Restriction"
    POST_VACCINE = "PostVaccine"

    @property
    def code(self) -> int:
        return _PHASE_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Phase":
        return _PHASES[int(code)]


_PHASES = (Phase.PRE_COVID, Phase.RESTRICTION, Phase.POST_VACCINE)
_PHASE_CODES = {p: i for i, p in enumerate(_PHASES)}


@dataclass(frozen=True)
class PhaseBoundaries:
    """Last day of the pre-COVID phase and last day of the restriction phase."""

    pre_end: date = date(2020, 3, 14)
    restr_end: date = date(2021, 6, 14)

    def __post_init__(self):
        if not self.pre_end < self.restr_end:
            raise ValueError("phase boundaries must be strictly ordered (pre_end < restr_end)")

    @classmethod
    def parse(cls, text: str) -> "PhaseBoundaries":
        """Parse ``pre_end=YYYY-MM-DD,restr_end=YYYY-MM-DD``."""
        values = {}
        for part in text.split(","):
            if not part.strip():
                continue
            key, _, val = part.partition("=")
            key = key.strip()
            if key not in ("pre_end", "restr_end") or not val:
                raise ValueError(f"bad phase boundary item {part!r}")
            values[key] = date.fromisoformat(val.strip())
        return cls(**values)


DEFAULT_BOUNDARIES = PhaseBoundaries()


def assign_phase(created: date, boundaries: PhaseBoundaries = DEFAULT_BOUNDARIES) -> Phase:
    if created <= boundaries.pre_end:
        return Phase.PRE_COVID
    if created <= boundaries.restr_end:
        return Phase.RESTRICTION
    return Phase.POST_VACCINE


def assign_phases(created: np.ndarray, boundaries: PhaseBoundaries = DEFAULT_BOUNDARIES) -> np.ndarray:
    """Vectorized :func:`assign_phase` returning integer phase codes."""
    created = np.asarray(created, dtype="datetime64[D]")
    codes = np.full(created.shape, Phase.POST_VACCINE.code, dtype=np.int8)
    codes[created <= np.datetime64(boundaries.restr_end)] = Phase.RESTRICTION.code
    codes[created <= np.datetime64(boundaries.pre_end)] = Phase.PRE_COVID.code
    return codes


@dataclass(frozen=True)
class BookingRecord:
    nights: int
    weight: int
    created: date
    phase: Phase
    month: int


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class BookingTable:
    """Column store of collapsed booking rows.

    Arrays are read-only; ``phase`` holds :class:`Phase` codes and ``month``
    the calendar month 1-12 of the creation date.
    """

    nights: np.ndarray
    weights: np.ndarray
    created: np.ndarray
    boundaries: PhaseBoundaries = DEFAULT_BOUNDARIES
    source: str = ""
    rows_read: int = 0
    rows_dropped: int = 0
    weight_dropped: int = 0
    phase: np.ndarray = field(init=False, repr=False)
    month: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        nights = np.asarray(self.nights, dtype=np.int64)
        weights = np.asarray(self.weights, dtype=np.int64)
        created = np.asarray(self.created, dtype="datetime64[D]")
        if not (nights.shape == weights.shape == created.shape) or nights.ndim != 1:
            raise ValueError("nights, weights and created must be 1-D and equally long")
        if np.any(weights < 1):
            raise ValueError("weights must be >= 1")
        months = (created.astype("datetime64[M]").astype(np.int64) % 12 + 1).astype(np.int8)
        object.__setattr__(self, "nights", _readonly(nights))
        object.__setattr__(self, "weights", _readonly(weights))
        object.__setattr__(self, "created", _readonly(created))
        object.__setattr__(self, "phase", _readonly(assign_phases(created, self.boundaries)))
        object.__setattr__(self, "month", _readonly(months))

    def __len__(self) -> int:
        return int(self.nights.size)

    def __iter__(self) -> Iterator[BookingRecord]:
        for y, w, d, p, m in zip(self.nights, self.weights, self.created, self.phase, self.month):
            yield BookingRecord(int(y), int(w), d.astype(object), Phase.from_code(p), int(m))

    def __eq__(self, other):
        if not isinstance(other, BookingTable):
            return NotImplemented
        return (
            np.array_equal(self.nights, other.nights)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.created, other.created)
            and self.boundaries == other.boundaries
        )

    @property
    def total_weight(self) -> int:
        return int(self.weights.sum())

    @property
    def year_month(self) -> np.ndarray:
        return self.created.astype("datetime64[M]")

    def subset(self, mask: np.ndarray) -> "BookingTable":
        return BookingTable(
            self.nights[mask], self.weights[mask], self.created[mask], self.boundaries, source=self.source
        )

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[int, int, date | str]], *, collapse: bool = True,
                  boundaries: PhaseBoundaries = DEFAULT_BOUNDARIES) -> "BookingTable":
        nights = np.array([r[0] for r in rows], dtype=np.int64)
        weights = np.array([r[1] for r in rows], dtype=np.int64)
        created = np.array([str(r[2]) for r in rows], dtype="datetime64[D]")
        return _build(nights, weights, created, collapse=collapse, boundaries=boundaries)


def _collapse(nights, weights, created):
    days = created.astype(np.int64)
    order = np.lexsort((nights, days))
    nights, weights, days = nights[order], weights[order], days[order]
    if nights.size == 0:
        return nights, weights, created[order]
    new = np.ones(nights.size, dtype=bool)
    new[1:] = (nights[1:] != nights[:-1]) | (days[1:] != days[:-1])
    starts = np.flatnonzero(new)
    summed = np.add.reduceat(weights, starts)
    return nights[starts], summed, days[starts].astype("datetime64[D]")


def _build(nights, weights, created, *, cap=STAY_CAP, collapse=True, boundaries=DEFAULT_BOUNDARIES,
           source="", rows_read=None):
    if np.any(weights < 1):
        bad = int(np.flatnonzero(weights < 1)[0])
        raise DataError(f"row {bad + 1}: weight must be a positive integer")
    keep = (nights >= 1) & (nights <= cap)
    rows_read = int(nights.size) if rows_read is None else rows_read
    dropped = int((~keep).sum())
    weight_dropped = int(weights[~keep].sum())
    nights, weights, created = nights[keep], weights[keep], created[keep]
    if nights.size == 0:
        raise DataError("no bookings left after filtering")
    if collapse:
        nights, weights, created = _collapse(nights, weights, created)
    return BookingTable(nights, weights, created, boundaries, source=source, rows_read=rows_read,
                        rows_dropped=dropped, weight_dropped=weight_dropped)


def _parse_int(text: str, what: str, rownum: int) -> int:
    try:
        return int(text.strip())
    except ValueError:
        raise DataError(f"row {rownum}: {what} {text!r} is not an integer") from None


def load_bookings(
    source: str | os.PathLike | IO[str] | IO[bytes],
    *,
    cap: int = STAY_CAP,
    collapse: bool = True,
    boundaries: PhaseBoundaries = DEFAULT_BOUNDARIES,
) -> BookingTable:
    """Read a ``nights,weight,created_date`` table.

    Rows with nights outside ``[1, cap]`` are dropped and counted; rows sharing
    (nights, created_date) are merged by summing weights unless ``collapse``
    is false. Row numbers in error messages count the header as row 1.
    """
    name = ""
    if isinstance(source, (str, os.PathLike)):
        name = str(source)
        with open(source, newline="", encoding="utf-8") as fh:
            text = fh.read()
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
        name = getattr(source, "name", "") or ""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("empty input: missing header row") from None
    header = [h.strip().lstrip("﻿") for h in header]
    try:
        idx = [header.index(col) for col in HEADER]
    except ValueError:
        raise DataError(f"header must contain columns {','.join(HEADER)}; got {','.join(header)}") from None

    nights, weights, created = [], [], []
    for rownum, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"row {rownum}: expected {len(header)} fields, got {len(row)}")
        nights.append(_parse_int(row[idx[0]], "nights", rownum))
        w = _parse_int(row[idx[1]], "weight", rownum)
        if w < 1:
            raise DataError(f"row {rownum}: weight must be >= 1, got {w}")
        weights.append(w)
        try:
            created.append(date.fromisoformat(row[idx[2]].strip()))
        except ValueError:
            raise DataError(f"row {rownum}: bad date {row[idx[2]]!r}") from None
    return _build(
        np.array(nights, dtype=np.int64),
        np.array(weights, dtype=np.int64),
        np.array(created, dtype="datetime64[D]"),
        cap=cap,
        collapse=collapse,
        boundaries=boundaries,
        source=name,
    )


def write_bookings(table: BookingTable, dest: str | os.PathLike | IO[str]) -> None:
    lines = [",".join(HEADER)]
    for y, w, d in zip(table.nights.tolist(), table.weights.tolist(), table.created.astype(str).tolist()):
        lines.append(f"{y},{w},{d}")
    payload = "\n".join(lines) + "\n"
    if isinstance(dest, (str, os.PathLike)):
        Path(dest).write_text(payload, encoding="utf-8")
    else:
        dest.write(payload)


def write_provenance(table: BookingTable, dest: str | os.PathLike) -> None:
    Path(dest).write_text(
        f"rows_read={table.rows_read}\nrows_dropped={table.rows_dropped}\nweight_dropped={table.weight_dropped}\n",
        encoding="utf-8",
    )


@dataclass(frozen=True)
class MonthlyPoint:
    month: str
    wmean: float
    wsd: float
    total_weight: int
    phase_share: dict[Phase, float]


def monthly_aggregate(table: BookingTable) -> list[MonthlyPoint]:
    from .wstats import weighted_mean, weighted_variance

    if len(table) == 0:
        raise DataError("cannot aggregate an empty table")
    ym = table.year_month
    points = []
    for m in np.unique(ym):
        sel = ym == m
        y = table.nights[sel]
        w = table.weights[sel]
        ph = table.phase[sel]
        total = int(w.sum())
        share = {p: float(w[ph == p.code].sum()) / total for p in _PHASES}
        points.append(
            MonthlyPoint(
                month=str(m),
                wmean=weighted_mean(y, w),
                wsd=float(np.sqrt(weighted_variance(y, w))),
                total_weight=total,
                phase_share=share,
            )
        )
    return points
