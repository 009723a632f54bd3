"""
Road network, trajectories and travel-time reports.

Everything downstream (pathlets, embeddings, GP models) consumes the types
defined here. Positions are (lon, lat) in degrees; all distances are meters
on a local equirectangular projection, which is plenty for city-sized areas.
"""

from __future__ import annotations

import csv
import math
import re
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
DAY_S = 86_400.0
AVG_WINDOW_S = 1_800  # 30-minute time-of-day windows for TT_avg
N_AVG_WINDOWS = 48

SIGMA_FLOOR_S = 1.0
DEFAULT_SPEED_MPS = 8.0
MAX_MATCH_DIST_M = 50.0


class ValidationError(ValueError):
    """Input data violates a structural invariant."""


class StaleStatsError(KeyError):
    """A segment is missing from the statistics; they must be rebuilt."""


@dataclass(frozen=True)
class RoadSegment:
    id: int
    geometry: tuple[tuple[float, float], ...]
    length: float
    successors: tuple[int, ...] = ()

    def __post_init__(self):
        if self.length <= 0:
            raise ValidationError(f"segment {self.id}: length must be > 0")
        if len(self.geometry) < 2:
            raise ValidationError(f"segment {self.id}: geometry needs >= 2 points")


class Projection:
    """Local equirectangular lon/lat <-> meters projection."""

    def __init__(self, lon0: float, lat0: float):
        self.lon0 = lon0
        self.lat0 = lat0
        self._kx = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * math.pi / 180.0
        self._ky = EARTH_RADIUS_M * math.pi / 180.0

    def to_xy(self, lonlat) -> np.ndarray:
        a = np.asarray(lonlat, dtype=float)
        return np.stack([(a[..., 0] - self.lon0) * self._kx, (a[..., 1] - self.lat0) * self._ky], axis=-1)

    def to_lonlat(self, xy) -> np.ndarray:
        a = np.asarray(xy, dtype=float)
        return np.stack([a[..., 0] / self._kx + self.lon0, a[..., 1] / self._ky + self.lat0], axis=-1)


class RoadNetwork:
    """Directed road graph keyed by segment id."""

    def __init__(self, segments: Iterable[RoadSegment]):
        self.segments: dict[int, RoadSegment] = {}
        for seg in segments:
            if seg.id in self.segments:
                raise ValidationError(f"duplicate segment id {seg.id}")
            self.segments[seg.id] = seg
        self.predecessors: dict[int, list[int]] = defaultdict(list)
        for seg in self.segments.values():
            for s in seg.successors:
                if s not in self.segments:
                    raise ValidationError(f"segment {seg.id}: unknown successor {s}")
                self.predecessors[s].append(seg.id)
        pts = np.array([p for seg in self.segments.values() for p in seg.geometry]) if self.segments else np.zeros((1, 2))
        self.projection = Projection(float(pts[:, 0].mean()), float(pts[:, 1].mean()))
        self._anchor_xy: dict[int, np.ndarray] = {}

    def __len__(self):
        return len(self.segments)

    def __contains__(self, seg_id):
        return seg_id in self.segments

    def __getitem__(self, seg_id) -> RoadSegment:
        return self.segments[seg_id]

    def ids(self) -> list[int]:
        return sorted(self.segments)

    def adjacent(self, a: int, b: int) -> bool:
        return b in self.segments[a].successors

    def neighbors(self, seg_id: int) -> list[int]:
        """Successors and predecessors, deduplicated, in a stable order."""
        out = list(self.segments[seg_id].successors) + self.predecessors.get(seg_id, [])
        return sorted(set(out))

    def anchor_xy(self, seg_id: int) -> np.ndarray:
        """Midpoint of the segment polyline (by arc length), in projected meters."""
        if seg_id not in self._anchor_xy:
            xy = self.projection.to_xy(self.segments[seg_id].geometry)
            self._anchor_xy[seg_id] = _polyline_midpoint(xy)
        return self._anchor_xy[seg_id]

    def anchor(self, seg_id: int) -> tuple[float, float]:
        lon, lat = self.projection.to_lonlat(self.anchor_xy(seg_id))
        return float(lon), float(lat)

    def check_path(self, path: Sequence[int]):
        missing = [s for s in path if s not in self.segments]
        if missing:
            raise ValidationError(f"unknown segments in path: {missing}")
        for i, (a, b) in enumerate(zip(path, path[1:])):
            if not self.adjacent(a, b):
                raise ValidationError(f"path elements {i} and {i + 1} ({a} -> {b}) are not adjacent")


def _polyline_midpoint(xy: np.ndarray) -> np.ndarray:
    d = np.hypot(*np.diff(xy, axis=0).T)
    total = d.sum()
    if total == 0:
        return xy[0].copy()
    half = total / 2
    cum = np.concatenate([[0.0], np.cumsum(d)])
    i = min(int(np.searchsorted(cum, half, side="right")) - 1, len(d) - 1)
    frac = (half - cum[i]) / d[i] if d[i] > 0 else 0.0
    return xy[i] + frac * (xy[i + 1] - xy[i])


@dataclass
class RawTrajectory:
    vehicle_id: str
    points: list[tuple[float, float, float]]  # (lon, lat, t)

    def __post_init__(self):
        ts = [p[2] for p in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError(f"trajectory {self.vehicle_id}: timestamps must be strictly increasing")


@dataclass
class Visit:
    segment_id: int
    t_in: float
    t_out: float


@dataclass
class MapMatchedTrajectory:
    vehicle_id: str
    visits: list[Visit] = field(default_factory=list)

    @property
    def path(self) -> list[int]:
        return [v.segment_id for v in self.visits]

    def validate(self, net: RoadNetwork | None = None):
        for i, v in enumerate(self.visits):
            if v.t_out <= v.t_in:
                raise ValidationError(f"trajectory {self.vehicle_id}: visit {i} has t_out <= t_in")
            if i and v.t_in < self.visits[i - 1].t_out:
                raise ValidationError(f"trajectory {self.vehicle_id}: visit {i} is out of time order")
        if net is not None:
            net.check_path(self.path)


@dataclass(frozen=True)
class TravelTimeReport:
    segment_id: int
    t_exit: float
    travel_time: float

    def __post_init__(self):
        if not self.travel_time > 0:
            raise ValidationError(f"report on segment {self.segment_id}: travel time must be > 0")


def report_order(r: TravelTimeReport):
    return (r.t_exit, r.segment_id, r.travel_time)


def extract_reports(mm: MapMatchedTrajectory) -> list[TravelTimeReport]:
    """One report per visit; the report becomes available when the vehicle exits."""
    for i, v in enumerate(mm.visits):
        if v.t_out <= v.t_in:
            raise ValidationError(f"trajectory {mm.vehicle_id}: visit {i} has t_out <= t_in")
    return [TravelTimeReport(v.segment_id, v.t_out, v.t_out - v.t_in) for v in mm.visits]


def _point_segment_distances(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    u = np.einsum("ij,ij->i", p - a, ab) / np.where(denom > 0, denom, 1.0)
    u = np.clip(u, 0.0, 1.0)
    proj = a + u[:, None] * ab
    return np.hypot(*(p - proj).T)


def match_nearest(raw: RawTrajectory, net: RoadNetwork, max_match_dist: float = MAX_MATCH_DIST_M) -> list[MapMatchedTrajectory]:
    """Project each GPS point onto its nearest segment.

    Runs of points on the same segment collapse into one visit spanning the
    first and last timestamp of the run. The trajectory is split wherever a
    point is farther than ``max_match_dist`` from every segment, where two
    consecutive visits are not adjacent, or where a visit holds a single
    point (zero duration). After a split, pieces with fewer than two visits
    are dropped; an unsplit trajectory is kept even with a single visit.
    """
    owners, starts, ends = [], [], []
    for seg in net.segments.values():
        xy = net.projection.to_xy(seg.geometry)
        owners.extend([seg.id] * (len(xy) - 1))
        starts.append(xy[:-1])
        ends.append(xy[1:])
    owners = np.array(owners)
    a, b = np.concatenate(starts), np.concatenate(ends)

    assigned: list[int | None] = []
    for lon, lat, _ in raw.points:
        p = net.projection.to_xy((lon, lat))
        d = _point_segment_distances(np.broadcast_to(p, a.shape), a, b)
        j = int(np.argmin(d))
        assigned.append(int(owners[j]) if d[j] <= max_match_dist else None)

    pieces: list[list[Visit]] = [[]]
    runs: list[tuple[int | None, list[float]]] = []
    for seg_id, (_, _, t) in zip(assigned, raw.points):
        if runs and runs[-1][0] == seg_id:
            runs[-1][1].append(t)
        else:
            runs.append((seg_id, [t]))
    for seg_id, ts in runs:
        if seg_id is None or len(ts) < 2:
            pieces.append([])
            continue
        cur = pieces[-1]
        if cur and not net.adjacent(cur[-1].segment_id, seg_id):
            pieces.append([])
            cur = pieces[-1]
        cur.append(Visit(seg_id, ts[0], ts[-1]))

    out = []
    min_visits = 2 if len(pieces) > 1 else 1
    for visits in pieces:
        if len(visits) >= min_visits:
            out.append(MapMatchedTrajectory(f"{raw.vehicle_id}#{len(out)}" if len(pieces) > 1 else raw.vehicle_id, visits))
    return out


@dataclass(frozen=True)
class SegmentStats:
    mean: dict[int, float]
    std: dict[int, float]
    count: dict[int, int]

    def __contains__(self, seg_id):
        return seg_id in self.mean


def compute_segment_stats(
    reports: Iterable[TravelTimeReport],
    net: RoadNetwork | None = None,
    sigma_floor: float = SIGMA_FLOOR_S,
    default_speed: float = DEFAULT_SPEED_MPS,
) -> SegmentStats:
    """Per-segment mean and population std of travel time, std floored.

    When ``net`` is given, segments without reports get the free-flow
    fallback ``length / default_speed`` and the floor as std.
    """
    by_seg: dict[int, list[float]] = defaultdict(list)
    for r in reports:
        by_seg[r.segment_id].append(r.travel_time)
    mean, std, count = {}, {}, {}
    for seg_id, tts in by_seg.items():
        a = np.asarray(tts)
        mean[seg_id] = float(a.mean())
        std[seg_id] = max(float(a.std()), sigma_floor)
        count[seg_id] = len(a)
    if net is not None:
        for seg_id, seg in net.segments.items():
            if seg_id not in mean:
                mean[seg_id] = seg.length / default_speed
                std[seg_id] = sigma_floor
                count[seg_id] = 0
    return SegmentStats(mean, std, count)


def time_of_day_window(t: float, window_s: float = AVG_WINDOW_S) -> int:
    return int((t % DAY_S) // window_s)


class AvgTravelTimeTable:
    """Mean travel time per (segment, 30-minute time-of-day window).

    Lookups never fail: an empty cell falls back to the segment's overall
    mean, then to free-flow time from the segment length.
    """

    def __init__(self, cells: dict[tuple[int, int], float], overall: dict[int, float], lengths: dict[int, float], default_speed: float = DEFAULT_SPEED_MPS):
        self.cells = cells
        self.overall = overall
        self.lengths = lengths
        self.default_speed = default_speed

    def get(self, seg_id: int, window: int) -> float:
        if not 0 <= window < N_AVG_WINDOWS:
            raise ValueError(f"window index {window} outside [0, {N_AVG_WINDOWS})")
        v = self.cells.get((seg_id, window))
        if v is None:
            v = self.overall.get(seg_id)
        if v is None:
            if seg_id not in self.lengths:
                raise StaleStatsError(seg_id)
            v = self.lengths[seg_id] / self.default_speed
        return v

    def at(self, seg_id: int, t: float) -> float:
        return self.get(seg_id, time_of_day_window(t))


def compute_avg_travel_time(reports: Iterable[TravelTimeReport], net: RoadNetwork | None = None, default_speed: float = DEFAULT_SPEED_MPS) -> AvgTravelTimeTable:
    sums: dict[tuple[int, int], list[float]] = defaultdict(lambda: [0.0, 0])
    seg_sums: dict[int, list[float]] = defaultdict(lambda: [0.0, 0])
    for r in reports:
        c = sums[(r.segment_id, time_of_day_window(r.t_exit))]
        c[0] += r.travel_time
        c[1] += 1
        s = seg_sums[r.segment_id]
        s[0] += r.travel_time
        s[1] += 1
    cells = {k: v[0] / v[1] for k, v in sums.items()}
    overall = {k: v[0] / v[1] for k, v in seg_sums.items()}
    lengths = {} if net is None else {i: s.length for i, s in net.segments.items()}
    return AvgTravelTimeTable(cells, overall, lengths, default_speed)


def standardize(tt: float, seg_id: int, stats: SegmentStats) -> float:
    if seg_id not in stats.mean:
        raise StaleStatsError(f"segment {seg_id} has no statistics; rebuild them")
    return (tt - stats.mean[seg_id]) / stats.std[seg_id]


def destandardize(z: float, seg_id: int, stats: SegmentStats) -> float:
    if seg_id not in stats.mean:
        raise StaleStatsError(f"segment {seg_id} has no statistics; rebuild them")
    return z * stats.std[seg_id] + stats.mean[seg_id]


# -- file formats -----------------------------------------------------------

_WKT = re.compile(r"^\s*LINESTRING\s*\((.*)\)\s*$", re.IGNORECASE)


def fmt_float(x) -> str:
    """Shortest round-tripping text for a float (numpy scalars included)."""
    return repr(float(x))


def parse_wkt_linestring(text: str) -> tuple[tuple[float, float], ...]:
    m = _WKT.match(text)
    if not m:
        raise ValidationError(f"not a WKT LINESTRING: {text[:40]!r}")
    pts = []
    for pair in m.group(1).split(","):
        x, y = pair.split()
        pts.append((float(x), float(y)))
    return tuple(pts)


def format_wkt_linestring(geometry) -> str:
    return "LINESTRING (" + ", ".join(f"{x!r} {y!r}" for x, y in geometry) + ")"


def _split_ids(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(s) for s in text.split(";")) if text else ()


def _join_ids(ids) -> str:
    return ";".join(str(i) for i in ids)


def read_network(path) -> RoadNetwork:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return RoadNetwork(
        RoadSegment(int(r["segment_id"]), parse_wkt_linestring(r["wkt_linestring"]), float(r["length_m"]), _split_ids(r["successor_ids"]))
        for r in rows
    )


def write_network(net: RoadNetwork, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["segment_id", "length_m", "successor_ids", "wkt_linestring"])
        for sid in net.ids():
            s = net[sid]
            w.writerow([sid, fmt_float(s.length), _join_ids(s.successors), format_wkt_linestring(s.geometry)])


def read_reports(path) -> list[TravelTimeReport]:
    out = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            out.append(TravelTimeReport(int(r["segment_id"]), float(r["t_exit_epoch_s"]), float(r["travel_time_s"])))
    return out


def write_reports(reports: Iterable[TravelTimeReport], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["segment_id", "t_exit_epoch_s", "travel_time_s"])
        for r in sorted(reports, key=report_order):
            w.writerow([r.segment_id, fmt_float(r.t_exit), fmt_float(r.travel_time)])


def read_trajectories(path) -> list[RawTrajectory]:
    pts: dict[str, list] = defaultdict(list)
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            pts[r["vehicle_id"]].append((float(r["lon"]), float(r["lat"]), float(r["t_epoch_s"])))
    return [RawTrajectory(vid, sorted(p, key=lambda q: q[2])) for vid, p in pts.items()]


def write_trajectories(trajs: Iterable[RawTrajectory], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["vehicle_id", "lon", "lat", "t_epoch_s"])
        for tr in trajs:
            for lon, lat, t in tr.points:
                w.writerow([tr.vehicle_id, fmt_float(lon), fmt_float(lat), fmt_float(t)])


def read_visits(path) -> list[MapMatchedTrajectory]:
    """Map-matched trajectories: CSV ``trip_id,segment_id,t_in_epoch_s,t_out_epoch_s``."""
    trips: dict[str, MapMatchedTrajectory] = {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            tid = r["trip_id"]
            if tid not in trips:
                trips[tid] = MapMatchedTrajectory(tid)
            trips[tid].visits.append(Visit(int(r["segment_id"]), float(r["t_in_epoch_s"]), float(r["t_out_epoch_s"])))
    return list(trips.values())


def write_visits(trajs: Iterable[MapMatchedTrajectory], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["trip_id", "segment_id", "t_in_epoch_s", "t_out_epoch_s"])
        for tr in trajs:
            for v in tr.visits:
                w.writerow([tr.vehicle_id, v.segment_id, fmt_float(v.t_in), fmt_float(v.t_out)])
