"""Unsupervised Pick/NoPick labeling of cart telemetry.

Labels fall out of three removal stages applied in order: samples outside
the field boundary, spatio-temporal density outliers (DBSCAN noise), and
samples with implausible tray mass. Whatever survives all three stages is
labeled Pick. The module also derives cart speed from positions, used as
an optional model feature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegeneratePolygon, MalformedRow, SessionTooShort
from .ingest import NOPICK, PICK, CartSession

NOISE = -1  # DBSCAN noise sentinel


@dataclass
class FieldBoundary:
    """Simple closed polygon of planar vertices; closure is implicit."""

    vertices: np.ndarray  # (k, 2) easting/northing, meters

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise DegeneratePolygon("vertices must be an (k, 2) array")
        if len(self.vertices) < 3:
            raise DegeneratePolygon(f"polygon needs >= 3 vertices, got {len(self.vertices)}")
        if np.array_equal(self.vertices[0], self.vertices[-1]):
            raise DegeneratePolygon("closing vertex must not repeat the first vertex")
        if not np.all(np.isfinite(self.vertices)):
            raise DegeneratePolygon("polygon vertices must be finite")
        if _self_intersects(self.vertices):
            raise DegeneratePolygon("polygon edges self-intersect")

    def __len__(self):
        return len(self.vertices)


@dataclass(frozen=True)
class DbscanParams:
    """Neighborhood radius, core threshold, and the time embedding factor.

    ``time_scale`` is seconds-per-meter: timestamps divided by it land in
    the same units as the planar coordinates. The default equates 1 s to
    0.2 m, roughly how fast a picker advances along a bed.
    """

    eps: float = 1.5
    min_pts: int = 10
    time_scale: float = 5.0

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.min_pts < 2:
            raise ValueError("min_pts must be >= 2")
        if self.time_scale <= 0:
            raise ValueError("time_scale must be > 0")


@dataclass(frozen=True)
class MassBounds:
    """Valid tray-mass band (kg); defaults are the empty/full tray weights."""

    m_min: float = 0.5
    m_max: float = 5.5

    def __post_init__(self):
        if not (0 <= self.m_min < self.m_max):
            raise ValueError("need 0 <= m_min < m_max")


@dataclass
class LabelSequence:
    """Per-sample Pick/NoPick labels aligned with one session."""

    session_id: str
    labels: np.ndarray  # int8 of PICK / NOPICK

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.labels.ndim != 1 or len(self.labels) == 0:
            raise ValueError("labels must be a non-empty 1-D array")
        if not np.all((self.labels == PICK) | (self.labels == NOPICK)):
            raise ValueError("labels must be exactly Pick or NoPick")

    def __len__(self):
        return len(self.labels)

    @property
    def pick_count(self) -> int:
        return int(np.sum(self.labels == PICK))


@dataclass
class FeatureFrame:
    """Per-sample derived channels for one session."""

    session_id: str
    speed: np.ndarray  # m/s, >= 0
    mass: np.ndarray   # kg, pass-through of raw_mass
    ax: np.ndarray
    ay: np.ndarray
    az: np.ndarray

    def __len__(self):
        return len(self.speed)

    def channels(self, names) -> np.ndarray:
        """Stack the named channels into an (n, len(names)) matrix."""
        return np.stack([getattr(self, n) for n in names], axis=1)


# --- geometry ---------------------------------------------------------------


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _on_segment(p, a, b) -> bool:
    if _cross(a, b, p) != 0.0:
        return False
    return min(a[0], b[0]) <= p[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])


def _segments_properly_intersect(p1, p2, q1, q2) -> bool:
    d1 = _cross(q1, q2, p1)
    d2 = _cross(q1, q2, p2)
    d3 = _cross(p1, p2, q1)
    d4 = _cross(p1, p2, q2)
    if ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0)) and d1 != 0 and d2 != 0 and d3 != 0 and d4 != 0:
        return True
    # Collinear or endpoint touching counts as an intersection here.
    for p, a, b in ((p1, q1, q2), (p2, q1, q2), (q1, p1, p2), (q2, p1, p2)):
        if _on_segment(p, a, b):
            return True
    return False


def _self_intersects(vertices) -> bool:
    k = len(vertices)
    edges = [(vertices[i], vertices[(i + 1) % k]) for i in range(k)]
    for i in range(k):
        a1, a2 = edges[i]
        if a1[0] == a2[0] and a1[1] == a2[1]:
            return True  # zero-length edge
        for j in range(i + 1, k):
            if j == i + 1 or (i == 0 and j == k - 1):
                continue  # adjacent edges share a vertex by construction
            if _segments_properly_intersect(a1, a2, *edges[j]):
                return True
    return False


def point_in_polygon(p, boundary: FieldBoundary) -> bool:
    """True iff p is inside the polygon or on its boundary."""
    verts = boundary.vertices
    x, y = float(p[0]), float(p[1])
    k = len(verts)
    inside = False
    for i in range(k):
        ax_, ay_ = verts[i]
        bx, by = verts[(i + 1) % k]
        if _on_segment((x, y), (ax_, ay_), (bx, by)):
            return True
        # Even-odd ray to +x; half-open vertex rule avoids double counting.
        if (ay_ > y) != (by > y):
            x_cross = ax_ + (y - ay_) * (bx - ax_) / (by - ay_)
            if x < x_cross:
                inside = not inside
    return inside


def points_in_polygon(points, boundary: FieldBoundary) -> np.ndarray:
    """Vectorized point_in_polygon over an (n, 2) array."""
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    verts = boundary.vertices
    k = len(verts)
    inside = np.zeros(len(pts), dtype=bool)
    on_edge = np.zeros(len(pts), dtype=bool)
    for i in range(k):
        ax_, ay_ = verts[i]
        bx, by = verts[(i + 1) % k]
        cross = (bx - ax_) * (y - ay_) - (by - ay_) * (x - ax_)
        within_box = (
            (np.minimum(ax_, bx) <= x) & (x <= np.maximum(ax_, bx))
            & (np.minimum(ay_, by) <= y) & (y <= np.maximum(ay_, by))
        )
        on_edge |= (cross == 0.0) & within_box
        crosses = (ay_ > y) != (by > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = ax_ + (y - ay_) * (bx - ax_) / (by - ay_)
        inside ^= crosses & (x < x_cross)
    return inside | on_edge


# --- clustering -------------------------------------------------------------


def dbscan(points, params: DbscanParams) -> np.ndarray:
    """Cluster 3-D points (x, y, scaled time) with Euclidean DBSCAN.

    Returns one cluster id per point, NOISE (-1) for density outliers. A
    point's neighborhood includes itself. Border points reachable from
    several clusters join the cluster of their lowest-index core neighbor,
    which makes the assignment deterministic for a fixed input order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be an (n, 3) array")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    n = len(pts)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels

    neighbors = _eps_neighborhoods(pts, params.eps)
    core = np.array([len(nb) >= params.min_pts for nb in neighbors])

    # Clusters are the connected components of the core-core neighbor
    # graph, discovered in input order so ids are stable.
    cluster_id = -1
    for seed in range(n):
        if not core[seed] or labels[seed] != NOISE:
            continue
        cluster_id += 1
        labels[seed] = cluster_id
        queue = [seed]
        while queue:
            u = queue.pop()
            for v in neighbors[u]:
                if core[v] and labels[v] == NOISE:
                    labels[v] = cluster_id
                    queue.append(v)

    # Border points: non-core with at least one core neighbor.
    for i in range(n):
        if core[i] or labels[i] != NOISE:
            continue
        for v in neighbors[i]:
            if core[v]:
                labels[i] = labels[v]
                break
    return labels


def _eps_neighborhoods(pts, eps):
    """Neighbor index lists (ascending, self included) via a uniform grid."""
    cells = np.floor(pts / eps).astype(np.int64)
    grid: dict = {}
    for i, c in enumerate(map(tuple, cells)):
        grid.setdefault(c, []).append(i)
    grid = {c: np.array(idx, dtype=np.int64) for c, idx in grid.items()}

    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    eps2 = eps * eps
    neighbors = []
    for i in range(len(pts)):
        cx, cy, cz = cells[i]
        cand = [grid[key] for key in ((cx + ox, cy + oy, cz + oz) for ox, oy, oz in offsets) if key in grid]
        cand = np.concatenate(cand)
        d = pts[cand] - pts[i]
        close = cand[(d * d).sum(axis=1) <= eps2]
        close.sort()
        neighbors.append(close)
    return neighbors


# --- mass filter and the full labeling pass --------------------------------


def mass_valid(m, bounds: MassBounds):
    """Strictly inside the (m_min, m_max) band; works element-wise too."""
    return (bounds.m_min < m) & (m < bounds.m_max)


def annotate_session(
    session: CartSession,
    boundary: FieldBoundary,
    params: DbscanParams = DbscanParams(),
    bounds: MassBounds = MassBounds(),
) -> LabelSequence:
    """Label each sample Pick or NoPick via the three removal stages."""
    if len(session) == 0:
        raise ValueError("session must be non-empty")
    keep = points_in_polygon(np.stack([session.easting, session.northing], axis=1), boundary)

    idx = np.flatnonzero(keep)
    if len(idx):
        t = (session.gps_tow[idx] - session.gps_tow[idx[0]]) / 1000.0
        embedded = np.stack(
            [session.easting[idx], session.northing[idx], t / params.time_scale], axis=1
        )
        clusters = dbscan(embedded, params)
        keep[idx[clusters == NOISE]] = False

    keep &= mass_valid(session.raw_mass, bounds)
    labels = np.where(keep, PICK, NOPICK).astype(np.int8)
    return LabelSequence(session_id=session.session_id, labels=labels)


# --- speed derivation -------------------------------------------------------


def derive_speed(session: CartSession, window: int = 21, vmax: float = 5.0) -> FeatureFrame:
    """Per-sample speed from smoothed positions, plus feature pass-throughs.

    Positions get a centered moving average over ``window`` samples (the
    window shrinks symmetrically near the ends, which keeps linear motion
    exact). Speed is the central-difference derivative magnitude at the
    nominal sample spacing, one-sided at the endpoints, clamped to
    [0, vmax] so single-sample GNSS jumps cannot produce absurd values.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    n = len(session)
    if n < window:
        raise SessionTooShort(f"{session.session_id}: {n} samples < window {window}")

    east = _centered_moving_average(session.easting, window)
    north = _centered_moving_average(session.northing, window)
    dt = 1.0 / session.nominal_rate

    vx = np.empty(n)
    vy = np.empty(n)
    vx[1:-1] = (east[2:] - east[:-2]) / (2 * dt)
    vy[1:-1] = (north[2:] - north[:-2]) / (2 * dt)
    vx[0] = (east[1] - east[0]) / dt
    vy[0] = (north[1] - north[0]) / dt
    vx[-1] = (east[-1] - east[-2]) / dt
    vy[-1] = (north[-1] - north[-2]) / dt

    speed = np.clip(np.hypot(vx, vy), 0.0, vmax)
    return FeatureFrame(
        session_id=session.session_id,
        speed=speed,
        mass=session.raw_mass.copy(),
        ax=session.ax.copy(),
        ay=session.ay.copy(),
        az=session.az.copy(),
    )


def _centered_moving_average(x, window):
    half = window // 2
    c = np.concatenate([[0.0], np.cumsum(x)])
    i = np.arange(len(x))
    lo = np.maximum(i - half, 0)
    hi = np.minimum(i + half, len(x) - 1)
    # shrink symmetrically so the window stays centered at the edges
    shrink = np.minimum(i - lo, hi - i)
    lo, hi = i - shrink, i + shrink
    return (c[hi + 1] - c[lo]) / (hi - lo + 1)


# --- boundary file I/O -------------------------------------------------------


def load_boundary_csv(path) -> FieldBoundary:
    """Read a boundary polygon from an easting,northing CSV.

    A header row is optional; an explicit closing vertex equal to the
    first is dropped.
    """
    path = Path(path)
    verts = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line_no, row in enumerate(csv.reader(f), start=1):
            if not row:
                continue
            if line_no == 1 and not _is_float(row[0]):
                if [h.strip() for h in row] != ["easting", "northing"]:
                    raise MalformedRow(f"{path}:1: expected easting,northing header")
                continue
            if len(row) != 2:
                raise MalformedRow(f"{path}:{line_no}: expected 2 fields")
            try:
                verts.append((float(row[0]), float(row[1])))
            except ValueError as e:
                raise MalformedRow(f"{path}:{line_no}: {e}") from None
    if len(verts) > 3 and verts[0] == verts[-1]:
        verts = verts[:-1]
    return FieldBoundary(np.array(verts))


def save_boundary_csv(boundary: FieldBoundary, path) -> None:
    from .ingest import format_float

    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("easting,northing\n")
        for x, y in boundary.vertices:
            f.write(f"{format_float(x)},{format_float(y)}\n")


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False
