"""Synthetic labeled cart-days with exact ground truth.

A per-cart behavior state machine walks a picker through a harvest day:
idle staging before work, picking along beds (mass ramps on the load
cells), carting full trays to a headland station (mass drops to zero),
returning, switching rows with a partial tray, and day-wide scheduled
breaks. The emitted telemetry uses the ingest CSV schema; the returned
truth records per-sample behavioral states and the exact efficiency,
tray-count, and tray-fill figures implied by them.

Every quantity is drawn from a seeded generator, so a fixed seed gives
bit-identical output.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import date as _date, timedelta
from typing import NamedTuple

import numpy as np

from .errors import ConfigInvalid
from .ingest import (
    NOPICK,
    PICK,
    BreakRecord,
    CartSession,
    TrayCountRecord,
)
from .annotate import FieldBoundary

# Behavioral states. Only PICKING maps to the Pick label.
PREPOST = 0
PICKING = 1
DELIVERING = 2
RETURNING = 3
ROWSWITCH = 4
BREAK = 5

STATE_NAMES = {
    PREPOST: "PrePost",
    PICKING: "Picking",
    DELIVERING: "Delivering",
    RETURNING: "Returning",
    ROWSWITCH: "RowSwitch",
    BREAK: "Break",
}


@dataclass(frozen=True)
class RowGeometry:
    bed_width_m: float = 1.10
    row_length_m: float = 80.0
    rows_per_cart: int = 10


@dataclass(frozen=True)
class AccelNoise:
    """Per-state acceleration amplitudes (m/s^2), band-limited bursts."""

    idle_sigma: float = 0.02
    picking_sigma: float = 0.06
    handling_sigma: float = 0.45


@dataclass(frozen=True)
class SynthConfig:
    n_carts: int = 2
    day_length_s: float = 2400.0
    harvest_date: str = "5-12-24"
    pick_rate_kg_per_min: float = 0.70
    pick_rate_jitter: float = 0.10          # per-cart multiplicative spread
    tray_capacity_kg: float = 4.5           # net fruit mass per tray
    tare_kg: float = 0.5                    # empty tray weight on the cells
    deliver_dwell_s: tuple = (70.0, 0.30)   # lognormal median, sigma
    row_geometry: RowGeometry = RowGeometry()
    breaks: tuple = ((1100.0, 620.0),)      # (start_s, duration_s) from day start
    prepost_s: tuple = (60.0, 180.0)        # idle spans at the day's ends
    gnss_sigma_m: float = 0.32
    accel_noise: AccelNoise = AccelNoise()
    mass_noise_kg: float = 0.015            # measurement noise on the cells
    mass_ramp_noise: float = 0.25           # roughness of the picking ramp
    pick_speed_ms: float = 0.18             # advance along the bed
    walk_speed_ms: float = 1.05
    row_switch_dwell_s: float = 8.0
    rate: float = 10.0                      # samples per second
    seed: int = 0

    def validate(self):
        geom = self.row_geometry
        positives = {
            "n_carts": self.n_carts,
            "day_length_s": self.day_length_s,
            "pick_rate_kg_per_min": self.pick_rate_kg_per_min,
            "tray_capacity_kg": self.tray_capacity_kg,
            "pick_speed_ms": self.pick_speed_ms,
            "walk_speed_ms": self.walk_speed_ms,
            "rate": self.rate,
            "bed_width_m": geom.bed_width_m,
            "row_length_m": geom.row_length_m,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ConfigInvalid(f"{name} must be positive, got {value}")
        if self.gnss_sigma_m < 0 or self.mass_noise_kg < 0:
            raise ConfigInvalid("noise amplitudes must be >= 0")
        if self.day_length_s < 2 * max(self.prepost_s) + 120:
            raise ConfigInvalid("day_length_s too short for the pre/post idle spans")
        for start, dur in self.breaks:
            if dur <= 0 or start < 0 or start + dur > self.day_length_s:
                raise ConfigInvalid(f"break ({start}, {dur}) outside the day span")


@dataclass
class CartTruth:
    session_id: str
    states: np.ndarray                  # int8 per sample
    true_efficiency_pct: float
    true_tray_count: int
    true_tray_fill_min: float           # total pick time / (60 * trays)
    tray_pick_seconds: list
    true_easting: np.ndarray
    true_northing: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.where(self.states == PICKING, PICK, NOPICK).astype(np.int8)


@dataclass
class SynthTruth:
    harvest_date: str
    breaks_s: list                      # (start, end) in absolute session seconds
    carts: list
    injections: list = field(default_factory=list)


class SynthDay(NamedTuple):
    sessions: list
    truth: SynthTruth
    break_records: list
    tray_records: list
    boundary: FieldBoundary


# Day starts Tuesday 08:00 in GPS time-of-week milliseconds.
_DAY_START_TOW_MS = (2 * 24 + 8) * 3600 * 1000


def generate_day(cfg: SynthConfig) -> SynthDay:
    """Simulate one harvest day for every cart in the config."""
    cfg.validate()
    geom = cfg.row_geometry
    boundary = _field_boundary(cfg)
    breaks_abs = [
        (_DAY_START_TOW_MS / 1000.0 + s, _DAY_START_TOW_MS / 1000.0 + s + d)
        for s, d in cfg.breaks
    ]

    sessions, carts, break_records, tray_records = [], [], [], []
    for k in range(cfg.n_carts):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, k]))
        cart_id = str(k + 1)
        session_id = f"{cfg.harvest_date}_{cart_id}"
        session, truth = _simulate_cart(cfg, geom, k, session_id, rng)
        sessions.append(session)
        carts.append(truth)
        break_records.append(BreakRecord(cfg.harvest_date, cart_id, len(cfg.breaks)))
        if truth.true_tray_count >= 1:
            tray_records.append(
                TrayCountRecord(cfg.harvest_date, cart_id, truth.true_tray_count)
            )

    truth = SynthTruth(harvest_date=cfg.harvest_date, breaks_s=breaks_abs, carts=carts)
    return SynthDay(sessions, truth, break_records, tray_records, boundary)


def generate_season(cfg: SynthConfig, n_days: int, seed: int = None, start="4-10-24"):
    """Generate consecutive harvest days, reseeding each day."""
    base = seed if seed is not None else cfg.seed
    m, d, y = (int(p) for p in start.split("-"))
    first = _date(2000 + y, m, d)
    days = []
    for i in range(n_days):
        day = first + timedelta(days=3 * i)
        date_str = f"{day.month}-{day.day}-{day.year % 100}"
        days.append(generate_day(replace(cfg, harvest_date=date_str, seed=base + 1000 * i)))
    return days


def _field_boundary(cfg) -> FieldBoundary:
    geom = cfg.row_geometry
    y_max = cfg.n_carts * geom.rows_per_cart * geom.bed_width_m
    return FieldBoundary(
        np.array(
            [
                [-8.0, -3.0],
                [geom.row_length_m + 3.0, -3.0],
                [geom.row_length_m + 3.0, y_max + 3.0],
                [-8.0, y_max + 3.0],
            ]
        )
    )


def _simulate_cart(cfg, geom, cart_index, session_id, rng):
    n = int(round(cfg.day_length_s * cfg.rate))
    dt = 1.0 / cfg.rate

    pick_rate_kg_s = (
        cfg.pick_rate_kg_per_min
        / 60.0
        * float(np.clip(1.0 + rng.normal(0.0, cfg.pick_rate_jitter), 0.5, 1.5))
    )
    walk_speed = float(np.clip(cfg.walk_speed_ms * (1 + rng.normal(0, 0.08)), 0.6, 2.0))
    pick_speed = float(np.clip(cfg.pick_speed_ms * (1 + rng.normal(0, 0.15)), 0.05, 0.5))

    row0 = cart_index * geom.rows_per_cart
    row_y = lambda j: (row0 + j) * geom.bed_width_m + 0.5 * geom.bed_width_m
    staging = (-14.0 - 2.0 * cart_index, row_y(0))
    station = (-4.0, row_y(min(2, geom.rows_per_cart - 1)))

    t_enter = rng.uniform(*cfg.prepost_s)
    postlude = rng.uniform(*cfg.prepost_s)
    t_wrapup = cfg.day_length_s - postlude - 40.0

    breaks = [(s, s + d) for s, d in cfg.breaks]

    states = np.empty(n, dtype=np.int8)
    true_x = np.empty(n)
    true_y = np.empty(n)
    mass_true = np.empty(n)

    # --- mutable simulation state ---
    phase = "pre_idle"
    x, y = staging
    row = 0
    direction = 1.0
    net = 0.0                 # fruit mass on the current tray
    tray_on = False
    walk_target = None
    walk_after = None
    dwell_left = 0.0
    resume_xy = None
    trays = []                # pick seconds per delivered tray
    tray_pick_s = 0.0

    def start_walk(target, after):
        nonlocal phase, walk_target, walk_after
        phase, walk_target, walk_after = "walk", target, after

    for i in range(n):
        t = i * dt

        in_break = any(s <= t < e for s, e in breaks)
        if in_break and phase not in ("pre_idle", "walk_in", "walk_out", "post_idle"):
            # tray goes off the cells for the duration of the break
            states[i] = BREAK
            true_x[i], true_y[i] = x, y
            mass_true[i] = 0.0
            continue

        if phase == "pre_idle":
            if t >= t_enter:
                start_walk((0.0, row_y(row)), "start_picking")
                phase = "walk_in"
            states[i] = PREPOST
            true_x[i], true_y[i] = x, y
            mass_true[i] = 0.0
            continue

        if phase in ("walk_in", "walk", "walk_out"):
            tx, ty = walk_target
            dist = math.hypot(tx - x, ty - y)
            step = walk_speed * dt
            if dist <= step:
                x, y = tx, ty
                arrived = walk_after
                if phase == "walk_in" or arrived == "post_idle":
                    state_here = PREPOST
                else:
                    state_here = DELIVERING if arrived == "station_dwell" else RETURNING
                states[i] = state_here
                true_x[i], true_y[i] = x, y
                mass_true[i] = (cfg.tare_kg + net) if tray_on else 0.0
                # phase transition on arrival
                if arrived in ("start_picking", "resume_picking"):
                    if t >= t_wrapup:
                        start_walk(staging, "post_idle")
                        phase = "walk_out"
                    else:
                        tray_on = True
                        phase = "picking"
                elif arrived == "station_dwell":
                    phase = "station_dwell"
                    dwell_left = float(
                        np.clip(
                            rng.lognormal(math.log(cfg.deliver_dwell_s[0]), cfg.deliver_dwell_s[1]),
                            0.3 * cfg.deliver_dwell_s[0],
                            3.0 * cfg.deliver_dwell_s[0],
                        )
                    )
                elif arrived == "post_idle":
                    phase = "post_idle"
                continue
            x += (tx - x) / dist * step
            y += (ty - y) / dist * step
            if phase == "walk_in" or walk_after == "post_idle":
                states[i] = PREPOST
            elif walk_after == "station_dwell":
                states[i] = DELIVERING
            else:
                states[i] = RETURNING
            true_x[i], true_y[i] = x, y
            mass_true[i] = (cfg.tare_kg + net) if tray_on else 0.0
            continue

        if phase == "station_dwell":
            states[i] = DELIVERING
            true_x[i], true_y[i] = x, y
            mass_true[i] = 0.0
            dwell_left -= dt
            if dwell_left <= 0:
                trays.append(tray_pick_s)
                tray_pick_s = 0.0
                net = 0.0
                if t >= t_wrapup:
                    start_walk(staging, "post_idle")
                    phase = "walk_out"
                else:
                    start_walk(resume_xy, "resume_picking")
            continue

        if phase == "picking":
            if t >= t_wrapup:
                if net >= 0.25:
                    tray_on = False
                    resume_xy = (x, y)
                    start_walk(station, "station_dwell")
                else:
                    tray_on = False
                    net = 0.0
                    tray_pick_s = 0.0
                    start_walk(staging, "post_idle")
                    phase = "walk_out"
                states[i] = DELIVERING if walk_after == "station_dwell" else PREPOST
                true_x[i], true_y[i] = x, y
                mass_true[i] = 0.0
                continue
            states[i] = PICKING
            true_x[i], true_y[i] = x, y
            ramp = pick_rate_kg_s * dt
            if cfg.mass_ramp_noise > 0:
                ramp *= max(0.0, 1.0 + rng.normal(0.0, cfg.mass_ramp_noise))
            net += ramp
            tray_pick_s += dt
            mass_true[i] = cfg.tare_kg + net
            x += pick_speed * dt * direction
            if net >= cfg.tray_capacity_kg:
                tray_on = False
                resume_xy = (x, y)
                start_walk(station, "station_dwell")
            elif (direction > 0 and x >= geom.row_length_m) or (direction < 0 and x <= 0.0):
                row = (row + 1) % geom.rows_per_cart
                direction = -direction
                phase = "row_switch"
                dwell_left = cfg.row_switch_dwell_s + geom.bed_width_m / walk_speed
                resume_xy = (float(np.clip(x, 0.0, geom.row_length_m)), row_y(row))
            continue

        if phase == "row_switch":
            states[i] = ROWSWITCH
            # drift across the bed toward the next row
            ty = resume_xy[1]
            y += np.sign(ty - y) * min(abs(ty - y), walk_speed * 0.3 * dt)
            true_x[i], true_y[i] = x, y
            mass_true[i] = cfg.tare_kg + net
            dwell_left -= dt
            if dwell_left <= 0:
                x, y = resume_xy
                phase = "picking"
            continue

        if phase == "post_idle":
            states[i] = PREPOST
            true_x[i], true_y[i] = x, y
            mass_true[i] = 0.0
            continue

        raise AssertionError(f"unhandled phase {phase}")

    # --- observation noise ---
    obs_x = true_x + rng.normal(0.0, cfg.gnss_sigma_m, n) if cfg.gnss_sigma_m > 0 else true_x.copy()
    obs_y = true_y + rng.normal(0.0, cfg.gnss_sigma_m, n) if cfg.gnss_sigma_m > 0 else true_y.copy()
    mass_obs = mass_true + (
        rng.normal(0.0, cfg.mass_noise_kg, n) if cfg.mass_noise_kg > 0 else 0.0
    )
    accel = _synth_accel(states, cfg.accel_noise, rng, n)

    labels = np.where(states == PICKING, PICK, NOPICK).astype(np.int8)
    tow = _DAY_START_TOW_MS + (np.arange(n, dtype=np.int64) * int(round(1000 / cfg.rate)))

    session = CartSession(
        session_id=session_id,
        gps_tow=tow,
        easting=np.round(obs_x, 6),
        northing=np.round(obs_y, 6),
        ax=np.round(accel[0], 6),
        ay=np.round(accel[1], 6),
        az=np.round(accel[2], 6),
        raw_mass=np.round(mass_obs, 6),
        activity=labels,
        nominal_rate=cfg.rate,
    )

    eff, pick_s = _efficiency_from_states(states, tow, [(a, b) for a, b in _abs_breaks(cfg)])
    tray_count = len(trays)
    fill_min = pick_s / 60.0 / tray_count if tray_count else float("nan")
    truth = CartTruth(
        session_id=session_id,
        states=states,
        true_efficiency_pct=eff,
        true_tray_count=tray_count,
        true_tray_fill_min=fill_min,
        tray_pick_seconds=[round(v, 6) for v in trays],
        true_easting=true_x,
        true_northing=true_y,
    )
    return session, truth


def _abs_breaks(cfg):
    t0 = _DAY_START_TOW_MS / 1000.0
    return [(t0 + s, t0 + s + d) for s, d in cfg.breaks]


def _efficiency_from_states(states, tow, breaks_abs):
    """Exact per-cart efficiency implied by the behavioral states.

    Mirrors the estimation convention: trim to the first/last picking
    sample, drop samples inside day-wide breaks, then take the picking
    share of what remains. Sample counts stand in for seconds.
    """
    pick = states == PICKING
    idx = np.flatnonzero(pick)
    if len(idx) == 0:
        return float("nan"), 0.0
    lo, hi = idx[0], idx[-1]
    times = tow / 1000.0
    in_break = np.zeros(len(states), dtype=bool)
    for s, e in breaks_abs:
        in_break |= (times >= s) & (times < e)
    window = slice(lo, hi + 1)
    harvest = (hi - lo + 1) - int(np.sum(in_break[window]))
    picked = int(np.sum(pick[window] & ~in_break[window]))
    rate = 1000.0 / (tow[1] - tow[0]) if len(tow) > 1 else 10.0
    return 100.0 * picked / harvest, picked / rate


def _synth_accel(states, profile: AccelNoise, rng, n):
    handling = (states == DELIVERING) | (states == RETURNING) | (states == ROWSWITCH)
    sigma = np.where(
        states == PICKING,
        profile.picking_sigma,
        np.where(handling, profile.handling_sigma, profile.idle_sigma),
    )
    kernel = np.ones(5) / 5.0
    axes = []
    for _ in range(3):
        raw = rng.normal(0.0, 1.0, n) * sigma
        axes.append(np.convolve(raw, kernel, mode="same") * math.sqrt(5.0))
    return axes


# --- anomaly injection -------------------------------------------------------


def corrupt(sessions, severity: float, seed: int = 0):
    """Inject GPS jumps, over-range mass spikes, and dropout gaps.

    Rates scale linearly with ``severity`` in [0, 1]. Dropouts remove rows
    (logged with their pre-removal index); jump and spike entries carry
    indices into the returned sessions. Severity 0 returns untouched
    copies and an empty log.
    """
    if not 0 <= severity <= 1:
        raise ConfigInvalid(f"severity must be in [0, 1], got {severity}")
    out, log = [], []
    for s_idx, s in enumerate(sessions):
        rng = np.random.default_rng(np.random.SeedSequence([seed, s_idx]))
        cols = {
            name: getattr(s, name).copy()
            for name in ("gps_tow", "easting", "northing", "ax", "ay", "az", "raw_mass", "activity")
        }
        n = len(s)
        if severity > 0:
            # dropouts first so later indices refer to the final arrays
            keep = np.ones(n, dtype=bool)
            for _ in range(rng.poisson(3.0 * severity)):
                start = int(rng.integers(0, max(1, n - 100)))
                length = int(rng.integers(20, 101))
                keep[start : start + length] = False
                log.append(
                    {"session_id": s.session_id, "kind": "dropout", "start": start, "length": length}
                )
            for name in cols:
                cols[name] = cols[name][keep]
            m = len(cols["gps_tow"])

            for _ in range(rng.poisson(4e-4 * severity * m)):
                i = int(rng.integers(0, m))
                length = int(rng.integers(1, 4))
                angle = rng.uniform(0, 2 * math.pi)
                dist = rng.uniform(20.0, 80.0)
                sl = slice(i, min(i + length, m))
                cols["easting"][sl] += dist * math.cos(angle)
                cols["northing"][sl] += dist * math.sin(angle)
                log.append(
                    {
                        "session_id": s.session_id,
                        "kind": "gps_jump",
                        "index": i,
                        "length": sl.stop - i,
                        "magnitude_m": round(dist, 3),
                    }
                )
            for _ in range(rng.poisson(3e-4 * severity * m)):
                i = int(rng.integers(0, m))
                length = int(rng.integers(1, 6))
                value = rng.uniform(6.0, 12.0)
                sl = slice(i, min(i + length, m))
                cols["raw_mass"][sl] = value
                log.append(
                    {
                        "session_id": s.session_id,
                        "kind": "mass_spike",
                        "index": i,
                        "length": sl.stop - i,
                        "value_kg": round(value, 3),
                    }
                )
        out.append(CartSession(session_id=s.session_id, nominal_rate=s.nominal_rate, **cols))
    return out, log


# --- truth serialization -----------------------------------------------------


def save_truth_json(truth: SynthTruth, path) -> None:
    """Write per-cart truth with run-length-encoded states."""
    payload = {
        "harvest_date": truth.harvest_date,
        "breaks_s": [[round(a, 3), round(b, 3)] for a, b in truth.breaks_s],
        "carts": [
            {
                "session_id": c.session_id,
                "true_efficiency_pct": round(c.true_efficiency_pct, 6),
                "true_tray_count": c.true_tray_count,
                "true_tray_fill_min": round(c.true_tray_fill_min, 6)
                if not math.isnan(c.true_tray_fill_min)
                else None,
                "tray_pick_seconds": c.tray_pick_seconds,
                "states_rle": _rle(c.states),
            }
            for c in truth.carts
        ],
        "injections": truth.injections,
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=1)


def load_truth_json(path) -> SynthTruth:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    carts = []
    for c in payload["carts"]:
        states = _rle_expand(c["states_rle"])
        carts.append(
            CartTruth(
                session_id=c["session_id"],
                states=states,
                true_efficiency_pct=c["true_efficiency_pct"],
                true_tray_count=c["true_tray_count"],
                true_tray_fill_min=(
                    c["true_tray_fill_min"] if c["true_tray_fill_min"] is not None else float("nan")
                ),
                tray_pick_seconds=c["tray_pick_seconds"],
                true_easting=np.array([]),
                true_northing=np.array([]),
            )
        )
    return SynthTruth(
        harvest_date=payload["harvest_date"],
        breaks_s=[tuple(b) for b in payload["breaks_s"]],
        carts=carts,
        injections=payload.get("injections", []),
    )


def _rle(states) -> list:
    runs = []
    current, count = int(states[0]), 0
    for v in states:
        if int(v) == current:
            count += 1
        else:
            runs.append([current, count])
            current, count = int(v), 1
    runs.append([current, count])
    return runs


def _rle_expand(runs) -> np.ndarray:
    return np.concatenate([np.full(c, v, dtype=np.int8) for v, c in runs])
