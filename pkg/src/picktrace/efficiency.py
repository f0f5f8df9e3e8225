"""Picker-efficiency and tray-fill-time figures from label sequences.

The accounting convention throughout is sample counts divided by the
nominal sample rate, never wall-clock differencing, so duplicate
timestamps cannot corrupt the time budget.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotate import LabelSequence
from .errors import (
    BreakCountUnsatisfiable,
    NoPickActivity,
    NoTrays,
    TooFewValues,
    ZeroHarvestTime,
)
from .ingest import NOPICK, PICK, CartSession

EFFICIENCY = "efficiency_pct"
TRAY_FILL = "tray_fill_min"


@dataclass(frozen=True)
class BreakInterval:
    """Day-wide idle interval, in absolute session-time seconds."""

    start: float
    end: float

    def __post_init__(self):
        if not self.start < self.end:
            raise ValueError(f"break interval must have start < end, got {self}")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class EfficiencyReport:
    session_id: str
    total_harvest_time: float   # seconds, trimmed span minus breaks
    total_pick_time: float      # seconds
    efficiency: float           # percent
    tray_count: int
    tray_fill_time: float       # minutes
    breaks_removed: int
    break_seconds: float

    def __post_init__(self):
        if not 0 <= self.efficiency <= 100:
            raise ValueError(f"{self.session_id}: efficiency {self.efficiency} outside [0, 100]")
        if self.total_pick_time > self.total_harvest_time + 1e-9:
            raise ValueError(f"{self.session_id}: pick time exceeds harvest time")


@dataclass
class SeasonSummary:
    metric: str
    mean: float
    median: float
    vmin: float
    vmax: float
    sd: float
    ci_low: float
    ci_high: float
    n_in: int
    n_outliers: int
    conventions: dict = field(
        default_factory=lambda: {
            "quartiles": "linear interpolation between order statistics",
            "ci": "normal approximation, mean +/- 1.96 * sd / sqrt(n)",
            "sd": "sample standard deviation (n - 1)",
        }
    )


def trim_to_harvest(labels: LabelSequence) -> tuple[int, int]:
    """Inclusive index range from the first to the last Pick sample."""
    picks = np.flatnonzero(labels.labels == PICK)
    if len(picks) == 0:
        raise NoPickActivity(f"{labels.session_id}: no Pick samples")
    return int(picks[0]), int(picks[-1])


def detect_breaks(
    sessions,
    labels,
    break_records,
    idle_fraction: float = 0.8,
    min_break_s: float = 600.0,
) -> dict:
    """Find day-wide break intervals and pick each cart's top candidates.

    Over the day's common one-second timeline, a second counts as idle
    for a cart when fewer than half of its samples in that second are
    Pick (majority rule, so sporadic misclassified samples cannot break
    a long idle run apart). Seconds where at least ``idle_fraction`` of
    the recording carts are idle, in runs of at least ``min_break_s``,
    become candidates ranked by duration. Each session gets its
    break-log count's worth of the longest candidates (chronologically
    ordered); a shortfall emits a :class:`BreakCountUnsatisfiable`
    warning and proceeds.
    """
    if not sessions:
        raise ValueError("need at least one session for the day")
    if len(sessions) != len(labels):
        raise ValueError("sessions and labels must pair up")

    t0 = min(int(s.gps_tow[0] // 1000) for s in sessions)
    t1 = max(int(s.gps_tow[-1] // 1000) for s in sessions)
    n_sec = t1 - t0 + 1

    recording = np.zeros(n_sec, dtype=np.int32)
    idle = np.zeros(n_sec, dtype=np.int32)
    for s, lab in zip(sessions, labels):
        sec = (s.gps_tow // 1000).astype(np.int64) - t0
        samples = np.bincount(sec, minlength=n_sec)
        picked = np.bincount(sec, weights=(lab.labels == PICK), minlength=n_sec)
        has = samples > 0
        recording += has
        idle += has & (2 * picked < samples)

    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(recording > 0, idle / np.maximum(recording, 1), 0.0)
    hot = frac >= idle_fraction

    candidates = []
    start = None
    for i, flag in enumerate(np.append(hot, False)):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            dur = i - start
            if dur >= min_break_s:
                candidates.append(BreakInterval(float(t0 + start), float(t0 + i)))
            start = None
    candidates.sort(key=lambda b: b.duration, reverse=True)

    counts = {(r.harvest_date, r.cart_id): r.no_breaks for r in break_records}
    out = {}
    for s in sessions:
        want = counts.get((s.harvest_date, s.cart_id), 0)
        if want > len(candidates):
            warnings.warn(
                f"{s.session_id}: break log expects {want} breaks, "
                f"found {len(candidates)} candidates",
                BreakCountUnsatisfiable,
            )
        chosen = sorted(candidates[:want], key=lambda b: b.start)
        out[s.session_id] = chosen
    return out


def picker_efficiency(
    labels: LabelSequence,
    trim: tuple[int, int],
    breaks,
    rate: float,
    times_s: np.ndarray,
) -> float:
    """Percent of non-break harvest time spent picking."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    lo, hi = trim
    if not (0 <= lo <= hi < len(labels)):
        raise ValueError(f"trim range {trim} invalid for {len(labels)} samples")
    window = slice(lo, hi + 1)
    in_break = _break_mask(times_s, breaks)[window]
    harvest_samples = (hi - lo + 1) - int(np.sum(in_break))
    if harvest_samples <= 0:
        raise ZeroHarvestTime(f"{labels.session_id}: breaks cover the whole trimmed span")
    pick_samples = int(np.sum((labels.labels[window] == PICK) & ~in_break))
    return 100.0 * pick_samples / harvest_samples


def _break_mask(times_s, breaks) -> np.ndarray:
    mask = np.zeros(len(times_s), dtype=bool)
    for b in breaks:
        mask |= (times_s >= b.start) & (times_s < b.end)
    return mask


def count_trays(
    session: CartSession,
    record=None,
    full_kg: float = 4.0,
    empty_kg: float = 1.0,
    sustain_s: float = 3.0,
    median_window: int = 11,
) -> int:
    """Tray count from the log record, or from mass sawtooth resets.

    The record is authoritative when present. Otherwise a completion is a
    drop from at least ``full_kg`` down to at most ``empty_kg`` holding
    for ``sustain_s``, counted on median-filtered mass.
    """
    if record is not None:
        return int(record.tray_count)
    if len(session) == 0:
        raise ValueError("session must be non-empty")
    mass = _median_filter(session.raw_mass, median_window)
    need = max(1, int(round(sustain_s * session.nominal_rate)))
    count = 0
    armed = False
    low_run = 0
    for v in mass:
        if v >= full_kg:
            armed = True
            low_run = 0
        elif armed and v <= empty_kg:
            low_run += 1
            if low_run >= need:
                count += 1
                armed = False
                low_run = 0
        else:
            low_run = 0
    return count


def _median_filter(x, window):
    if window < 2 or len(x) < window:
        return np.asarray(x, dtype=np.float64)
    if window % 2 == 0:
        window += 1
    half = window // 2
    padded = np.pad(np.asarray(x, dtype=np.float64), half, mode="edge")
    view = np.lib.stride_tricks.sliding_window_view(padded, window)
    return np.median(view, axis=1)


def tray_fill_time(total_pick_time_s: float, tray_count: int) -> float:
    """Minutes of pick time per harvested tray."""
    if tray_count < 1:
        raise NoTrays(f"tray count must be >= 1, got {tray_count}")
    return total_pick_time_s / (60.0 * tray_count)


def iqr_filter(values):
    """Split values into (inliers, outliers) by the 1.5 IQR fences."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 4:
        raise TooFewValues(f"IQR filtering needs >= 4 values, got {len(v)}")
    q1, q3 = np.percentile(v, [25, 75])
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outlier = (v < lo) | (v > hi)
    return v[~outlier], v[outlier]


def season_summary(reports, metric: str = EFFICIENCY, use_iqr: bool = True) -> SeasonSummary:
    """Distribution statistics for one report metric, outliers removed."""
    attr = {EFFICIENCY: "efficiency", TRAY_FILL: "tray_fill_time"}.get(metric)
    if attr is None:
        raise ValueError(f"unknown metric {metric!r}")
    values = np.array([getattr(r, attr) for r in reports], dtype=np.float64)
    if len(values) < 4:
        raise TooFewValues(f"season summary needs >= 4 reports, got {len(values)}")
    if use_iqr:
        inliers, outliers = iqr_filter(values)
    else:
        inliers, outliers = values, values[:0]
    mean = float(np.mean(inliers))
    sd = float(np.std(inliers, ddof=1)) if len(inliers) > 1 else 0.0
    half = 1.96 * sd / np.sqrt(len(inliers))
    summary = SeasonSummary(
        metric=metric,
        mean=mean,
        median=float(np.median(inliers)),
        vmin=float(np.min(inliers)),
        vmax=float(np.max(inliers)),
        sd=sd,
        ci_low=mean - half,
        ci_high=mean + half,
        n_in=int(len(inliers)),
        n_outliers=int(len(outliers)),
    )
    summary.conventions["iqr_outlier_removal"] = bool(use_iqr)
    return summary


def compute_reports(
    sessions,
    labels,
    break_records=(),
    tray_records=(),
    idle_fraction: float = 0.8,
    min_break_s: float = 600.0,
    tray_kwargs: dict = None,
):
    """Run the full per-day report pipeline over many sessions.

    Sessions are grouped by harvest date for break detection. Returns
    (reports, skipped) where skipped lists (session_id, reason) pairs for
    sessions that could not produce a report.
    """
    if len(sessions) != len(labels):
        raise ValueError("sessions and labels must pair up")
    tray_by_key = {(r.harvest_date, r.cart_id): r for r in tray_records}
    by_date = {}
    for s, lab in zip(sessions, labels):
        by_date.setdefault(s.harvest_date, []).append((s, lab))

    reports, skipped = [], []
    for date in by_date:
        day = by_date[date]
        day_breaks = detect_breaks(
            [s for s, _ in day],
            [lab for _, lab in day],
            break_records,
            idle_fraction=idle_fraction,
            min_break_s=min_break_s,
        )
        for s, lab in day:
            try:
                reports.append(
                    _session_report(
                        s, lab, day_breaks[s.session_id],
                        tray_by_key.get((s.harvest_date, s.cart_id)),
                        tray_kwargs or {},
                    )
                )
            except (NoPickActivity, ZeroHarvestTime, NoTrays) as e:
                skipped.append((s.session_id, type(e).__name__))
    return reports, skipped


REPORT_COLUMNS = (
    "session_id",
    "harvest_time_s",
    "pick_time_s",
    "efficiency_pct",
    "tray_count",
    "tray_fill_min",
    "breaks_removed",
    "break_seconds",
)


def save_report_csv(reports, path) -> None:
    from .errors import IoFailure
    from .ingest import format_float

    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(",".join(REPORT_COLUMNS) + "\n")
            for r in reports:
                f.write(
                    f"{r.session_id},{format_float(r.total_harvest_time)},"
                    f"{format_float(r.total_pick_time)},{format_float(r.efficiency)},"
                    f"{r.tray_count},{format_float(r.tray_fill_time)},"
                    f"{r.breaks_removed},{format_float(r.break_seconds)}\n"
                )
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def load_report_csv(path) -> list:
    from .errors import MalformedHeader, MalformedRow

    path = Path(path)
    reports = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = tuple(h.strip() for h in next(reader, ()))
        if header != REPORT_COLUMNS:
            raise MalformedHeader(f"{path}: expected columns {','.join(REPORT_COLUMNS)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                reports.append(
                    EfficiencyReport(
                        session_id=row[0],
                        total_harvest_time=float(row[1]),
                        total_pick_time=float(row[2]),
                        efficiency=float(row[3]),
                        tray_count=int(row[4]),
                        tray_fill_time=float(row[5]),
                        breaks_removed=int(row[6]),
                        break_seconds=float(row[7]),
                    )
                )
            except (ValueError, IndexError) as e:
                raise MalformedRow(f"{path}:{line_no}: {e}") from None
    return reports


def _session_report(session, labels, breaks, tray_record, tray_kwargs) -> EfficiencyReport:
    rate = session.nominal_rate
    trim = trim_to_harvest(labels)
    lo, hi = trim
    times = session.times_s
    in_break = _break_mask(times, breaks)[lo : hi + 1]
    break_samples = int(np.sum(in_break))
    harvest_s = ((hi - lo + 1) - break_samples) / rate
    pick_samples = int(np.sum((labels.labels[lo : hi + 1] == PICK) & ~in_break))
    pick_s = pick_samples / rate
    efficiency = picker_efficiency(labels, trim, breaks, rate, times)
    trays = count_trays(session, tray_record, **tray_kwargs)
    fill = tray_fill_time(pick_s, trays)  # raises NoTrays when trays == 0
    return EfficiencyReport(
        session_id=session.session_id,
        total_harvest_time=harvest_s,
        total_pick_time=pick_s,
        efficiency=efficiency,
        tray_count=trays,
        tray_fill_time=fill,
        breaks_removed=len(breaks),
        break_seconds=break_samples / rate,
    )
