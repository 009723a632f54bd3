"""
Synthetic city generator.

A lattice of two-way streets (one directed segment per direction, drawn 5 m
to the right of the centerline so the nearest-segment matcher can tell the
directions apart). Every segment follows a daily travel-time curve

    mu_i(t) = base_i * (1 + a_i * sin^2(pi * (t - phi_i)))      t in days

taken from one of a few traffic-profile groups, multiplied by a day-specific
regional congestion factor, incident slowdowns and lognormal noise per
traversal. The regional factor is exp(sigma * z) with z a unit
Ornstein-Uhlenbeck process per (day, city quadrant), so deviations from the
usual curve persist for about an hour and are shared by nearby streets. Vehicles commute on fixed
L-shaped routes morning and evening and sometimes make a random-walk trip.
Only a ``sample_prob`` fraction of trips are probes that report.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimator import Query, write_queries
from .network import (
    DAY_S,
    MapMatchedTrajectory,
    Projection,
    RawTrajectory,
    RoadNetwork,
    RoadSegment,
    TravelTimeReport,
    Visit,
    extract_reports,
    fmt_float,
    report_order,
    write_network,
    write_reports,
    write_trajectories,
    write_visits,
)

EPOCH0 = 1_704_067_200.0  # 2024-01-01 00:00 UTC
LANE_OFFSET_M = 5.0

# (amplitude, peak hour) per traffic-profile group
PROFILES = ((1.2, 8.0), (1.0, 17.5), (0.6, 13.0), (0.25, 3.0))


@dataclass(frozen=True)
class Incident:
    segment_id: int
    start: float  # epoch seconds
    duration: float  # seconds
    slowdown: float

    def __post_init__(self):
        if self.slowdown < 1:
            raise ValueError("incident slowdown factor must be >= 1")

    def active(self, t: float) -> bool:
        return self.start <= t < self.start + self.duration


@dataclass
class SynthConfig:
    rows: int = 8
    cols: int = 8
    days: int = 15
    test_days: int = 1
    vehicles: int = 600
    sample_prob: float = 0.1
    incidents: list[Incident] | None = None  # None: two automatic incidents on the test day
    seed: int = 7
    block_m: float = 300.0
    noise_sigma: float = 0.15
    day_sigma: float = 0.2  # regional day-to-day variation, log scale
    day_corr_h: float = 1.0  # its correlation time
    background_incidents: int = 8  # random incidents per training day
    n_queries: int = 300
    extra_trip_prob: float = 0.4
    gps_interval_s: float = 10.0
    origin: tuple[float, float] = (23.72, 37.98)

    def __post_init__(self):
        if not 0 < self.sample_prob <= 1:
            raise ValueError("sample_prob must be in (0, 1]")


@dataclass
class Profile:
    base: float
    amplitude: float
    phase: float  # days
    group: int

    def mu(self, t_epoch: float) -> float:
        t = t_epoch / DAY_S
        return self.base * (1 + self.amplitude * math.sin(math.pi * (t - self.phase)) ** 2)


@dataclass
class Trip:
    trip_id: str
    vehicle: int
    visits: list[Visit]
    probe: bool
    commute: bool

    @property
    def path(self):
        return [v.segment_id for v in self.visits]


@dataclass
class SynthCity:
    config: SynthConfig
    net: RoadNetwork
    profiles: dict[int, Profile]
    trips: list[Trip]
    incidents: list[Incident]
    queries: list[Query] = field(default_factory=list)

    @property
    def split_time(self) -> float:
        return EPOCH0 + (self.config.days - self.config.test_days) * DAY_S

    def probe_trajectories(self, history: bool) -> list[MapMatchedTrajectory]:
        out = []
        for tr in self.trips:
            if tr.probe and (tr.visits[0].t_in < self.split_time) == history:
                out.append(MapMatchedTrajectory(tr.trip_id, list(tr.visits)))
        return out

    def reports(self, history: bool) -> list[TravelTimeReport]:
        rs = [r for tr in self.probe_trajectories(history) for r in extract_reports(tr)]
        return sorted(rs, key=report_order)

    def raw_trajectories(self) -> list[RawTrajectory]:
        return [gps_trace(self.net, MapMatchedTrajectory(tr.trip_id, tr.visits), self.config.gps_interval_s) for tr in self.trips if tr.probe]

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_network(self.net, out / "network.csv")
        write_reports(self.reports(True), out / "reports_hist.csv")
        write_reports(self.reports(False), out / "reports_stream.csv")
        write_visits(self.probe_trajectories(True), out / "visits_hist.csv")
        write_visits(self.probe_trajectories(False), out / "visits_stream.csv")
        write_trajectories(self.raw_trajectories(), out / "trajectories.csv")
        write_queries(self.queries, out / "queries.csv")
        with open(out / "incidents.csv", "w") as f:
            f.write("segment_id,start_epoch_s,duration_s,slowdown\n")
            for inc in self.incidents:
                f.write(",".join([str(inc.segment_id), fmt_float(inc.start), fmt_float(inc.duration), fmt_float(inc.slowdown)]) + "\n")


def lattice_network(rows: int, cols: int, block_m: float = 300.0, origin=(23.72, 37.98)) -> tuple[RoadNetwork, dict[tuple, int]]:
    """Directed lattice; returns the network and a map (node_a, node_b) -> segment id."""
    proj = Projection(*origin)
    nodes = [(r, c) for r in range(rows) for c in range(cols)]
    edges = []
    for r, c in nodes:
        for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
            if 0 <= r + dr < rows and 0 <= c + dc < cols:
                edges.append(((r, c), (r + dr, c + dc)))
    edge_id = {e: i for i, e in enumerate(edges)}
    out_of: dict = {}
    for a, b in edges:
        out_of.setdefault(a, []).append((a, b))
    segs = []
    for (a, b), sid in edge_id.items():
        pa = np.array([a[1] * block_m, a[0] * block_m])
        pb = np.array([b[1] * block_m, b[0] * block_m])
        d = (pb - pa) / block_m
        right = np.array([d[1], -d[0]]) * LANE_OFFSET_M
        geom = proj.to_lonlat(np.array([pa + right, pb + right]))
        succ = tuple(edge_id[e] for e in out_of[b] if e[1] != a)
        segs.append(RoadSegment(sid, tuple(map(tuple, geom.tolist())), block_m, succ))
    net = RoadNetwork(segs)
    return net, edge_id


def _l_route(a, b, horizontal_first: bool) -> list[tuple]:
    nodes = [a]
    r, c = a
    moves = []
    h = [(0, 1 if b[1] > c else -1)] * abs(b[1] - c)
    v = [(1 if b[0] > r else -1, 0)] * abs(b[0] - r)
    moves = h + v if horizontal_first else v + h
    for dr, dc in moves:
        r, c = r + dr, c + dc
        nodes.append((r, c))
    return nodes


def _random_walk(rng, edge_id, start_seg: int, n: int, net: RoadNetwork) -> list[int]:
    path = [start_seg]
    for _ in range(n - 1):
        succ = net[path[-1]].successors
        path.append(int(succ[rng.integers(len(succ))]))
    return path


def gps_trace(net: RoadNetwork, mm: MapMatchedTrajectory, interval: float) -> RawTrajectory:
    """GPS points roughly every ``interval`` seconds along each visit, at
    least two per visit."""
    pts = []
    for v in mm.visits:
        xy = net.projection.to_xy(net[v.segment_id].geometry)
        a, b = xy[0], xy[-1]
        n = max(2, int(math.ceil((v.t_out - v.t_in) / interval)) + 1)
        # stay strictly inside the segment so ends never tie with a neighbor
        for u in np.linspace(0.05, 0.95, n):
            p = net.projection.to_lonlat(a + u * (b - a))
            pts.append((float(p[0]), float(p[1]), v.t_in + u * (v.t_out - v.t_in)))
    return RawTrajectory(mm.vehicle_id, pts)


def generate(config: SynthConfig = SynthConfig()) -> SynthCity:
    rng = np.random.default_rng(config.seed)
    net, edge_id = lattice_network(config.rows, config.cols, config.block_m, config.origin)
    profiles = {}
    for sid in net.ids():
        g = int(rng.integers(len(PROFILES)))
        amp, peak = PROFILES[g]
        speed = rng.uniform(9.0, 14.0)
        profiles[sid] = Profile(net[sid].length / speed, amp * rng.uniform(0.9, 1.1), peak / 24.0 - 0.5 + rng.normal(0, 0.01), g)

    # commuters: homes anywhere, workplaces pulled toward the center
    R, C = config.rows, config.cols
    plans = []
    for v in range(config.vehicles):
        home = (int(rng.integers(R)), int(rng.integers(C)))
        while True:
            work = (int(np.clip(round(rng.normal((R - 1) / 2, R / 5)), 0, R - 1)), int(np.clip(round(rng.normal((C - 1) / 2, C / 5)), 0, C - 1)))
            if abs(work[0] - home[0]) + abs(work[1] - home[1]) >= 2:
                break
        hf = bool(rng.integers(2))
        to_work = _l_route(home, work, hf)
        to_home = _l_route(work, home, not hf)
        plans.append((
            [edge_id[(a, b)] for a, b in zip(to_work, to_work[1:])],
            [edge_id[(a, b)] for a, b in zip(to_home, to_home[1:])],
        ))

    regional = _regional_field(rng, net, config)
    incidents = config.incidents
    trips: list[Trip] = []
    pending_trips = []
    for day in range(config.days):
        d0 = EPOCH0 + day * DAY_S
        for v, (am, pm) in enumerate(plans):
            pending_trips.append((d0 + rng.normal(8.0, 0.7) * 3600, v, am, True))
            pending_trips.append((d0 + rng.normal(17.5, 0.75) * 3600, v, pm, True))
            if rng.random() < config.extra_trip_prob:
                hour = rng.uniform(6.0, 22.0)
                path = _random_walk(rng, edge_id, int(rng.integers(len(net))), int(rng.integers(4, 13)), net)
                pending_trips.append((d0 + hour * 3600, v, path, False))
    if incidents is None:
        incidents = auto_incidents(net, pending_trips, config)
    incidents = list(incidents) + background_incidents(rng, net, config)

    pending_trips.sort(key=lambda x: (x[0], x[1]))
    for k, (t0, v, path, commute) in enumerate(pending_trips):
        visits = []
        t = t0
        for sid in path:
            tt = profiles[sid].mu(t) * regional(sid, t)
            for inc in incidents:
                if inc.segment_id == sid and inc.active(t):
                    tt *= inc.slowdown
            if config.noise_sigma > 0:
                tt *= math.exp(rng.normal(0, config.noise_sigma))
            visits.append(Visit(sid, t, t + tt))
            t += tt
        trips.append(Trip(f"v{v}t{k}", v, visits, bool(rng.random() < config.sample_prob), commute))

    city = SynthCity(config, net, profiles, trips, list(incidents))
    city.queries = _pick_queries(city, rng)
    return city


def _regional_field(rng, net: RoadNetwork, config: SynthConfig):
    """Day-specific multiplicative congestion per city quadrant."""
    anchors = {sid: net.anchor_xy(sid) for sid in net.ids()}
    xy = np.array(list(anchors.values()))
    mid = (xy.min(axis=0) + xy.max(axis=0)) / 2
    region = {sid: int(a[0] > mid[0]) + 2 * int(a[1] > mid[1]) for sid, a in anchors.items()}
    step = 600.0
    n = int(config.days * DAY_S / step) + 2
    z = np.zeros((4, n))
    if config.day_sigma > 0:
        rho = math.exp(-step / (config.day_corr_h * 3600))
        eps = rng.normal(size=(4, n))
        z[:, 0] = eps[:, 0]
        for k in range(1, n):
            z[:, k] = rho * z[:, k - 1] + math.sqrt(1 - rho * rho) * eps[:, k]
    logf = config.day_sigma * z

    def factor(sid: int, t: float) -> float:
        u = min(max((t - EPOCH0) / step, 0.0), n - 1.000001)
        k = int(u)
        return math.exp(np.interp(u - k, (0.0, 1.0), logf[region[sid], k : k + 2]))

    return factor


def background_incidents(rng, net: RoadNetwork, config: SynthConfig) -> list[Incident]:
    """Everyday disruptions on the training days: uniform segment, start
    between 06:00 and 20:00, 1-3 h, slowdown 1.5-3."""
    ids = net.ids()
    out = []
    for day in range(config.days - config.test_days):
        d0 = EPOCH0 + day * DAY_S
        for _ in range(config.background_incidents):
            seg = ids[int(rng.integers(len(ids)))]
            out.append(Incident(seg, d0 + rng.uniform(6, 20) * 3600, rng.uniform(1, 3) * 3600, rng.uniform(1.5, 3.0)))
    return out


def auto_incidents(net: RoadNetwork, planned, config: SynthConfig) -> list[Incident]:
    """Two incidents on the test day, on the busiest segments of the
    morning and evening peaks."""
    test0 = EPOCH0 + (config.days - config.test_days) * DAY_S
    spans = ((7.0, 3.0), (16.5, 3.0))
    out: list[Incident] = []
    for start_h, dur_h in spans:
        a, b = test0 + start_h * 3600, test0 + (start_h + dur_h) * 3600
        counts: dict[int, int] = {}
        for t0, _, path, _ in planned:
            if a <= t0 < b:
                for sid in path:
                    counts[sid] = counts.get(sid, 0) + 1
        ranked = sorted(counts, key=lambda s: (-counts[s], s))
        seg = next(s for s in ranked if all(s != i.segment_id for i in out))
        out.append(Incident(seg, a, dur_h * 3600, 3.0))
    return out


def _pick_queries(city: SynthCity, rng) -> list[Query]:
    """Held-out (non-probe) test-day trips. Every trip touching an active
    incident is kept; the rest is a uniform sample up to ``n_queries``."""
    split = city.split_time
    held = [tr for tr in city.trips if not tr.probe and tr.visits[0].t_in >= split]
    hit = [tr for tr in held if trip_hits_incident(tr, city.incidents)]
    rest = [tr for tr in held if not trip_hits_incident(tr, city.incidents)]
    n_rest = max(0, min(len(rest), city.config.n_queries - len(hit)))
    picked = hit + [rest[i] for i in sorted(rng.choice(len(rest), n_rest, replace=False))] if rest else hit
    picked.sort(key=lambda tr: (tr.visits[0].t_in, tr.trip_id))
    return [
        Query(i, tuple(tr.path), tr.visits[0].t_in, tr.visits[-1].t_out - tr.visits[0].t_in)
        for i, tr in enumerate(picked)
    ]


def trip_hits_incident(trip: Trip, incidents) -> bool:
    return any(inc.segment_id == v.segment_id and inc.active(v.t_in) for v in trip.visits for inc in incidents)


def query_hits_incident(q: Query, city: SynthCity) -> bool:
    """Whether the trip behind ``q`` crossed an incident while it was active."""
    by_start = {(tr.visits[0].t_in, tuple(tr.path)): tr for tr in city.trips}
    tr = by_start.get((q.t_dep, q.path))
    return tr is not None and trip_hits_incident(tr, city.incidents)


def profile_groups(n_segments: int = 20, days: int = 60, n_groups: int = 4, reports_per_day: int = 40, noise_sigma: float = 0.15, seed: int = 0) -> tuple[list[TravelTimeReport], dict[int, int]]:
    """Reports for unconnected segments whose daily curves come from
    ``n_groups`` traffic-profile groups (segment i is in group i % n_groups).

    Returns the time-sorted reports and each segment's group.
    """
    rng = np.random.default_rng(seed)
    groups, profiles = {}, {}
    for sid in range(n_segments):
        g = sid % n_groups
        amp, peak = PROFILES[g % len(PROFILES)]
        groups[sid] = g
        profiles[sid] = Profile(rng.uniform(20.0, 40.0), amp * rng.uniform(0.9, 1.1), peak / 24.0 - 0.5 + rng.normal(0, 0.01), g)
    out = []
    for day in range(days):
        d0 = EPOCH0 + day * DAY_S
        for sid, prof in profiles.items():
            for t in np.sort(d0 + rng.uniform(0, DAY_S, reports_per_day)):
                out.append(TravelTimeReport(sid, float(t), prof.mu(float(t)) * math.exp(rng.normal(0, noise_sigma))))
    return sorted(out, key=report_order), groups
