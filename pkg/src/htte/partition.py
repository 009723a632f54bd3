"""
Spatio-temporal partitioning of reports into per-(grid cell, time-of-day
window) GP models.

Each segment belongs to exactly one core cell (by its anchor point) and each
time of day to exactly one core window. Training reports additionally flow
into neighboring cells/windows whose boundary, widened by the overlap, still
contains them. Queries only ever go to the core model.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from typing import Iterable, NamedTuple

import numpy as np

from . import gpcore
from .gpcore import GpModel, Hyperparameters, NumericalError
from .network import DAY_S, RoadNetwork, SegmentStats, TravelTimeReport, standardize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PartitionConfig:
    cell_size: float = 2000.0  # meters
    spatial_overlap: float = 500.0
    window_len: int = 60  # minutes
    temporal_overlap: int = 30
    max_points_per_model: int = 1500
    realtime_reserve: float = 0.2  # share of the cap kept free of history at seeding

    # key=value config file names
    _KEYS = {
        "cell_size_m": "cell_size",
        "spatial_overlap_m": "spatial_overlap",
        "window_min": "window_len",
        "temporal_overlap_min": "temporal_overlap",
        "max_points_per_model": "max_points_per_model",
        "realtime_reserve": "realtime_reserve",
    }

    def __post_init__(self):
        if min(self.cell_size, self.window_len, self.max_points_per_model) <= 0:
            raise ValueError("partition sizes must be positive")
        if not 0 <= self.spatial_overlap < self.cell_size or not 0 <= self.temporal_overlap < self.window_len:
            raise ValueError("overlaps must be smaller than the core cell/window")
        if not 0 <= self.realtime_reserve < 1:
            raise ValueError("realtime_reserve must be in [0, 1)")
        if 1440 % self.window_len:
            raise ValueError("window_min must divide a day")

    @property
    def history_cap(self) -> int:
        return max(1, int(self.max_points_per_model * (1 - self.realtime_reserve)))

    @property
    def n_windows(self) -> int:
        return 1440 // self.window_len

    @classmethod
    def from_mapping(cls, kv: dict) -> "PartitionConfig":
        types = {f.name: f.type for f in fields(cls)}
        args = {}
        for key, name in cls._KEYS.items():
            if key in kv:
                args[name] = (int if types[name] in ("int", int) else float)(kv[key])
        return cls(**args)


class ModelKey(NamedTuple):
    cell: tuple[int, int]  # (row, col)
    window: int


def read_config(path) -> dict[str, str]:
    """Parse a ``key=value`` text file; blank lines and ``#`` comments ignored."""
    out = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"bad config line: {line!r}")
            out[key.strip()] = value.strip()
    return out


class Grid:
    """Uniform square cells over projected meters, anchored at the network's
    south-west corner."""

    def __init__(self, origin_xy, config: PartitionConfig):
        self.x0, self.y0 = float(origin_xy[0]), float(origin_xy[1])
        self.config = config

    def core_cell(self, xy) -> tuple[int, int]:
        cs = self.config.cell_size
        return int(math.floor((xy[1] - self.y0) / cs)), int(math.floor((xy[0] - self.x0) / cs))

    def cells(self, xy) -> list[tuple[int, int]]:
        cs, ov = self.config.cell_size, self.config.spatial_overlap
        row, col = self.core_cell(xy)
        out = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = row + dr, col + dc
                bx0, by0 = self.x0 + c * cs, self.y0 + r * cs
                if bx0 - ov < xy[0] < bx0 + cs + ov and by0 - ov < xy[1] < by0 + cs + ov or (dr, dc) == (0, 0):
                    out.append((r, c))
        return out


def core_window(t: float, config: PartitionConfig) -> int:
    return int((t % DAY_S) // (config.window_len * 60))


def windows(t: float, config: PartitionConfig) -> list[int]:
    """Core window plus neighbors whose overlap band contains ``t``."""
    wl, ov, nw = config.window_len * 60, config.temporal_overlap * 60, config.n_windows
    tod = t % DAY_S
    w = int(tod // wl)
    out = [w]
    if tod - w * wl < ov:
        out.append((w - 1) % nw)
    if (w + 1) * wl - tod < ov:
        out.append((w + 1) % nw)
    return sorted(set(out))


@dataclass(frozen=True)
class ModelEntry:
    """A published GP model plus which of its points arrived in real time."""

    model: GpModel
    realtime: np.ndarray  # bool per training point
    segments: np.ndarray  # unit id per training point


def evict(entry: ModelEntry, config: PartitionConfig) -> ModelEntry:
    """Cap a model at ``max_points_per_model`` points.

    Oldest real-time points go first; if historical points alone still
    exceed the cap they are thinned with a uniform stride over time.
    """
    m = entry.model
    if m.n <= config.max_points_per_model:
        return entry
    keep = _evict_indices(m.t, entry.realtime, config.max_points_per_model)
    return ModelEntry(gpcore.subset(m, keep), entry.realtime[keep], entry.segments[keep])


class ModelIndex:
    """All GP models of the city plus the buffers feeding them.

    One writer calls ``ingest``/``window_tick``; models are immutable values
    swapped into ``models`` so readers always see a complete model.
    """

    def __init__(self, net: RoadNetwork, embeddings: dict[int, np.ndarray], stats: SegmentStats, hp: Hyperparameters, config: PartitionConfig = PartitionConfig(), evict_enabled: bool = True):
        self.net = net
        self.embeddings = embeddings
        self.dim = len(next(iter(embeddings.values()))) if embeddings else 0
        self.stats = stats
        self.hp = hp
        self.config = config
        self.evict_enabled = evict_enabled
        anchors = {sid: net.anchor_xy(sid) for sid in net.ids()}
        xy = np.array(list(anchors.values())) if anchors else np.zeros((1, 2))
        self.grid = Grid(xy.min(axis=0), config)
        self.segment_anchor = anchors
        self.segment_cell = {sid: self.grid.core_cell(a) for sid, a in anchors.items()}
        self.occupied = set(self.segment_cell.values())
        self.models: dict[ModelKey, ModelEntry] = {}
        self.pending: dict[ModelKey, list[TravelTimeReport]] = {}
        self.prev_window: int | None = None
        self.dropped = 0

    # -- routing

    def route_report(self, report: TravelTimeReport) -> list[ModelKey]:
        if report.segment_id not in self.segment_anchor:
            raise KeyError(report.segment_id)
        cells = [c for c in self.grid.cells(self.segment_anchor[report.segment_id]) if c in self.occupied]
        return [ModelKey(c, w) for c in cells for w in windows(report.t_exit, self.config)]

    def route_query(self, seg_id: int, t: float) -> ModelKey:
        return ModelKey(self.segment_cell[seg_id], core_window(t, self.config))

    # -- data

    def _arrays(self, reports: list[TravelTimeReport]):
        t = np.array([r.t_exit / DAY_S for r in reports])
        E = np.array([self.embeddings[r.segment_id] for r in reports]).reshape(len(reports), self.dim)
        y = np.array([standardize(r.travel_time, r.segment_id, self.stats) for r in reports])
        segs = np.array([r.segment_id for r in reports], dtype=int)
        return t, E, y, segs

    def _fit_entry(self, reports: list[TravelTimeReport], realtime: np.ndarray) -> ModelEntry:
        t, E, y, segs = self._arrays(reports)
        if self.evict_enabled and len(reports) > self.config.history_cap:
            # thin before the O(n^3) factorization, leaving room for real-time points
            keep = _evict_indices(t, realtime, self.config.history_cap)
            t, E, y, segs, realtime = t[keep], E[keep], y[keep], segs[keep], realtime[keep]
        return ModelEntry(gpcore.fit(t, E, y, self.hp, self.dim), realtime, segs)

    def seed(self, reports: Iterable[TravelTimeReport]):
        """Offline initialization: every historical report goes to all of its
        models; then one fit per model."""
        buckets: dict[ModelKey, list[TravelTimeReport]] = {}
        for r in reports:
            try:
                keys = self.route_report(r)
            except KeyError:
                self.dropped += 1
                continue
            for key in keys:
                buckets.setdefault(key, []).append(r)
        for key in sorted(buckets):
            rs = buckets[key]
            self.models[key] = self._fit_entry(rs, np.zeros(len(rs), bool))
        return self

    def ingest(self, report: TravelTimeReport) -> list[ModelKey]:
        """Buffer a real-time report until the next window change."""
        try:
            keys = self.route_report(report)
        except KeyError:
            self.dropped += 1
            return []
        for key in keys:
            self.pending.setdefault(key, []).append(report)
        return keys

    def tick_window(self, now: float) -> int:
        return int(now // (self.config.window_len * 60))

    def window_tick(self, now: float) -> list[ModelKey]:
        """Fold pending reports into their models when the window changed."""
        w = self.tick_window(now)
        if w == self.prev_window:
            return []
        self.prev_window = w
        rebuilt = []
        for key in sorted(self.pending):
            batch = self.pending[key]
            if not batch:
                continue
            t, E, y, segs = self._arrays(batch)
            old = self.models.get(key)
            if old is None:
                old = ModelEntry(gpcore.fit([], np.zeros((0, self.dim)), [], self.hp, self.dim), np.zeros(0, bool), np.zeros(0, int))
            realtime = np.concatenate([old.realtime, np.ones(len(y), bool)])
            segs = np.concatenate([old.segments, segs])
            try:
                model = gpcore.extend(old.model, t, E, y)
            except NumericalError:
                logger.warning("extend failed for %s; refitting from scratch", key)
                m = old.model
                model = gpcore.fit(np.concatenate([m.t, t]), np.vstack([m.E, E]), np.concatenate([m.y, y]), self.hp, self.dim)
            entry = ModelEntry(model, realtime, segs)
            if self.evict_enabled:
                entry = evict(entry, self.config)
            self.models[key] = entry
            rebuilt.append(key)
        self.pending = {}
        return rebuilt

    def model_for(self, key: ModelKey) -> GpModel | None:
        entry = self.models.get(key)
        if entry is None or entry.model.n == 0:
            return None
        return entry.model

    def sizes(self) -> dict[ModelKey, int]:
        return {k: e.model.n for k, e in self.models.items()}


def _evict_indices(t: np.ndarray, realtime: np.ndarray, cap: int) -> np.ndarray:
    """Indices kept by the eviction policy (see ``evict``)."""
    n = len(t)
    if n <= cap:
        return np.arange(n)
    rt = np.flatnonzero(realtime)
    rt = rt[np.argsort(t[rt], kind="stable")]
    drop = np.zeros(n, bool)
    drop[rt[: n - cap]] = True
    keep = np.flatnonzero(~drop)
    if len(keep) > cap:
        hist = keep[~realtime[keep]]
        hist = hist[np.argsort(t[hist], kind="stable")]
        n_hist = cap - int(realtime[keep].sum())
        picked = hist[(np.arange(n_hist) * len(hist)) // n_hist] if n_hist > 0 else hist[:0]
        keep = np.sort(np.concatenate([picked, keep[realtime[keep]]]))
    return keep
