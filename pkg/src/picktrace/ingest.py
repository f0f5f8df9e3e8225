"""Readers and writers for the three on-disk dataset formats.

Telemetry CSV (one row per 10 Hz sample, possibly many carts per file):

    date_cartID,GPS_TOW,easting,northing,ax,ay,az,raw_mass,activity

Break-log CSV: ``harvest_date,#carrito,no_breaks``.
Tray-count CSV: ``harvest_date,#carrito,#trays_carrito``.

All loaders accept UTF-8 files with LF or CRLF line endings. Floats are
written with up to 6 decimal places (trailing zeros trimmed), which keeps
save -> load round-trips exact for data quantized at that resolution.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateKey,
    EmptyFile,
    IoFailure,
    MalformedHeader,
    MalformedRow,
    WeekRollover,
)

log = logging.getLogger(__name__)

GPS_WEEK_MS = 7 * 24 * 3600 * 1000

# Per-sample activity labels. UNLABELED marks samples whose activity cell
# was absent or empty.
PICK = 1
NOPICK = 0
UNLABELED = -1

TELEMETRY_COLUMNS = (
    "date_cartID",
    "GPS_TOW",
    "easting",
    "northing",
    "ax",
    "ay",
    "az",
    "raw_mass",
    "activity",
)

BREAK_LOG_COLUMNS = ("harvest_date", "#carrito", "no_breaks")
TRAY_COUNT_COLUMNS = ("harvest_date", "#carrito", "#trays_carrito")

_ACTIVITY_VALUES = {
    "pick": PICK,
    "nopick": NOPICK,
    "1": PICK,
    "0": NOPICK,
}


@dataclass(frozen=True)
class TelemetrySample:
    """One 10 Hz telemetry record."""

    gps_tow: int          # GPS time of week, milliseconds
    easting: float        # planar coordinate, meters
    northing: float
    ax: float             # cart acceleration, m/s^2
    ay: float
    az: float
    raw_mass: float       # kilograms
    activity: int = UNLABELED


@dataclass
class CartSession:
    """One cart-day of ordered telemetry, stored column-wise.

    Samples are kept as parallel numpy arrays for the numerical pipeline;
    the ``samples`` property materializes :class:`TelemetrySample` objects
    on demand.
    """

    session_id: str
    gps_tow: np.ndarray
    easting: np.ndarray
    northing: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    az: np.ndarray
    raw_mass: np.ndarray
    activity: np.ndarray = None  # int8 of PICK/NOPICK/UNLABELED
    nominal_rate: float = 10.0

    def __post_init__(self):
        self.gps_tow = np.asarray(self.gps_tow, dtype=np.int64)
        for name in ("easting", "northing", "ax", "ay", "az", "raw_mass"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.gps_tow)
        for name in ("easting", "northing", "ax", "ay", "az", "raw_mass"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name} length differs from gps_tow")
        if self.activity is None:
            self.activity = np.full(n, UNLABELED, dtype=np.int8)
        else:
            self.activity = np.asarray(self.activity, dtype=np.int8)
            if len(self.activity) != n:
                raise ValueError("activity length differs from samples")
        if not np.all(np.isfinite(self.easting)) or not np.all(np.isfinite(self.northing)):
            raise ValueError(f"{self.session_id}: non-finite position sample")
        if np.any(self.gps_tow < 0) or np.any(self.gps_tow >= GPS_WEEK_MS):
            raise ValueError(f"{self.session_id}: GPS_TOW outside [0, one week)")
        if np.any(np.diff(self.gps_tow) < 0):
            raise ValueError(f"{self.session_id}: samples not sorted by GPS_TOW")
        if self.nominal_rate <= 0:
            raise ValueError("nominal_rate must be positive")

    def __len__(self):
        return len(self.gps_tow)

    @property
    def harvest_date(self) -> str:
        """Date part of ``date_cartID`` (split on the last underscore)."""
        return self.session_id.rsplit("_", 1)[0]

    @property
    def cart_id(self) -> str:
        parts = self.session_id.rsplit("_", 1)
        return parts[1] if len(parts) == 2 else self.session_id

    @property
    def times_s(self) -> np.ndarray:
        """Sample times in seconds (GPS time of week)."""
        return self.gps_tow / 1000.0

    @property
    def labeled(self) -> bool:
        return bool(np.all(self.activity != UNLABELED))

    @property
    def samples(self) -> list[TelemetrySample]:
        return [
            TelemetrySample(
                int(self.gps_tow[i]), float(self.easting[i]), float(self.northing[i]),
                float(self.ax[i]), float(self.ay[i]), float(self.az[i]),
                float(self.raw_mass[i]), int(self.activity[i]),
            )
            for i in range(len(self))
        ]

    @classmethod
    def from_samples(cls, session_id, samples, nominal_rate=10.0) -> "CartSession":
        if not samples:
            raise ValueError("samples must be non-empty")
        return cls(
            session_id=session_id,
            gps_tow=np.array([s.gps_tow for s in samples], dtype=np.int64),
            easting=np.array([s.easting for s in samples]),
            northing=np.array([s.northing for s in samples]),
            ax=np.array([s.ax for s in samples]),
            ay=np.array([s.ay for s in samples]),
            az=np.array([s.az for s in samples]),
            raw_mass=np.array([s.raw_mass for s in samples]),
            activity=np.array([s.activity for s in samples], dtype=np.int8),
            nominal_rate=nominal_rate,
        )


@dataclass(frozen=True)
class BreakRecord:
    harvest_date: str
    cart_id: str
    no_breaks: int


@dataclass(frozen=True)
class TrayCountRecord:
    harvest_date: str
    cart_id: str
    tray_count: int


def format_float(x: float) -> str:
    """Render a float with up to 6 decimal places, trailing zeros trimmed."""
    s = f"{x:.6f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _parse_activity(cell: str, seen: set) -> int:
    cell = cell.strip()
    if cell == "":
        return UNLABELED
    value = _ACTIVITY_VALUES.get(cell.lower())
    if value is None:
        raise ValueError(f"unrecognized activity value {cell!r}")
    seen.add("numeric" if cell in ("0", "1") else "string")
    return value


def load_session_csv(path) -> list[CartSession]:
    """Parse a telemetry CSV into one CartSession per distinct date_cartID.

    Rows are kept in file order and then stably sorted by GPS_TOW, so ties
    preserve file order. The ``activity`` column may be missing entirely
    (unlabeled data) or have empty cells.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if tuple(header) == TELEMETRY_COLUMNS:
            has_activity = True
        elif tuple(header) == TELEMETRY_COLUMNS[:-1]:
            has_activity = False
        else:
            raise MalformedHeader(
                f"{path}: expected columns {','.join(TELEMETRY_COLUMNS)} "
                f"(activity optional), got {','.join(header)}"
            )

        order: list[str] = []
        rows: dict[str, list] = {}
        encodings_seen: set = set()
        n_cols = 9 if has_activity else 8
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_cols:
                raise MalformedRow(f"{path}:{line_no}: expected {n_cols} fields, got {len(row)}")
            sid = row[0].strip()
            try:
                tow = int(row[1])
                values = [float(v) for v in row[2:8]]
                activity = _parse_activity(row[8], encodings_seen) if has_activity else UNLABELED
            except ValueError as e:
                raise MalformedRow(f"{path}:{line_no}: {e}") from None
            if not (0 <= tow < GPS_WEEK_MS):
                raise MalformedRow(f"{path}:{line_no}: GPS_TOW {tow} outside [0, one week)")
            if not all(np.isfinite(values[:2])):
                raise MalformedRow(f"{path}:{line_no}: non-finite position")
            if sid not in rows:
                order.append(sid)
                rows[sid] = []
            rows[sid].append((tow, *values, activity))

    if not rows:
        raise EmptyFile(f"{path}: no data rows")
    if encodings_seen:
        log.info("%s: activity encoded as %s", path.name, "/".join(sorted(encodings_seen)))

    sessions = []
    for sid in order:
        data = np.array(rows[sid], dtype=np.float64)
        tow = data[:, 0].astype(np.int64)
        # A harvest day never spans a GPS week boundary; a big backwards jump
        # in file order means the week rolled over mid-session.
        if np.any(np.diff(tow) < -GPS_WEEK_MS // 2):
            raise WeekRollover(f"{path}: session {sid} crosses a GPS week boundary")
        idx = np.argsort(tow, kind="stable")
        sessions.append(
            CartSession(
                session_id=sid,
                gps_tow=tow[idx],
                easting=data[idx, 1],
                northing=data[idx, 2],
                ax=data[idx, 3],
                ay=data[idx, 4],
                az=data[idx, 5],
                raw_mass=data[idx, 6],
                activity=data[idx, 7].astype(np.int8),
            )
        )
    return sessions


def save_session_csv(sessions, path) -> None:
    """Write sessions in the nine-column telemetry schema (LF endings).

    Unlabeled samples get an empty activity cell, so unlabeled sessions
    round-trip as unlabeled.
    """
    if not sessions:
        raise ValueError("sessions must be non-empty")
    path = Path(path)
    names = {PICK: "Pick", NOPICK: "NoPick", UNLABELED: ""}
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(",".join(TELEMETRY_COLUMNS) + "\n")
            for s in sessions:
                for i in range(len(s)):
                    f.write(
                        f"{s.session_id},{int(s.gps_tow[i])},"
                        f"{format_float(s.easting[i])},{format_float(s.northing[i])},"
                        f"{format_float(s.ax[i])},{format_float(s.ay[i])},{format_float(s.az[i])},"
                        f"{format_float(s.raw_mass[i])},{names[int(s.activity[i])]}\n"
                    )
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _csv_files(path) -> list[Path]:
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.csv"))
        if not files:
            raise EmptyFile(f"{path}: no CSV files in directory")
        return files
    return [path]


def _load_keyed_csv(path, columns, value_parser):
    """Shared loader for the (date, cart) keyed CSV formats."""
    records = []
    seen = {}
    for file in _csv_files(path):
        with open(file, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            try:
                header = tuple(h.strip() for h in next(reader))
            except StopIteration:
                raise EmptyFile(f"{file}: file is empty") from None
            if header != columns:
                raise MalformedHeader(
                    f"{file}: expected columns {','.join(columns)}, got {','.join(header)}"
                )
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3:
                    raise MalformedRow(f"{file}:{line_no}: expected 3 fields")
                date, cart = row[0].strip(), row[1].strip()
                try:
                    value = value_parser(row[2])
                except ValueError as e:
                    raise MalformedRow(f"{file}:{line_no}: {e}") from None
                key = (date, cart)
                if key in seen:
                    raise DuplicateKey(
                        f"{file}:{line_no}: duplicate entry for {date} cart {cart} "
                        f"(first seen at {seen[key]})"
                    )
                seen[key] = f"{file}:{line_no}"
                records.append((date, cart, value))
    return records


def load_break_log(path) -> list[BreakRecord]:
    """Load break counts from one CSV file or a directory of them."""

    def parse(cell):
        n = int(cell)
        if n < 0:
            raise ValueError(f"no_breaks must be >= 0, got {n}")
        return n

    return [BreakRecord(d, c, v) for d, c, v in _load_keyed_csv(path, BREAK_LOG_COLUMNS, parse)]


def load_tray_counts(path) -> list[TrayCountRecord]:
    """Load tray counts from one CSV file or a directory of them."""

    def parse(cell):
        n = int(cell)
        if n < 1:
            raise ValueError(f"#trays_carrito must be >= 1, got {n}")
        return n

    return [TrayCountRecord(d, c, v) for d, c, v in _load_keyed_csv(path, TRAY_COUNT_COLUMNS, parse)]


def save_break_log(records, path) -> None:
    _save_keyed_csv(
        [(r.harvest_date, r.cart_id, r.no_breaks) for r in records], BREAK_LOG_COLUMNS, path
    )


def save_tray_counts(records, path) -> None:
    _save_keyed_csv(
        [(r.harvest_date, r.cart_id, r.tray_count) for r in records], TRAY_COUNT_COLUMNS, path
    )


def _save_keyed_csv(rows, columns, path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(",".join(columns) + "\n")
            for date, cart, value in rows:
                f.write(f"{date},{cart},{value}\n")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def sessions_equal(a: CartSession, b: CartSession) -> bool:
    """Field-for-field equality of two sessions (labels included)."""
    return (
        a.session_id == b.session_id
        and len(a) == len(b)
        and bool(np.array_equal(a.gps_tow, b.gps_tow))
        and all(
            np.array_equal(getattr(a, n), getattr(b, n))
            for n in ("easting", "northing", "ax", "ay", "az", "raw_mass", "activity")
        )
    )
