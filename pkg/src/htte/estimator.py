"""
Hybrid travel-time estimation: offline initialization and streamed queries.

Offline: time-of-day averages, per-segment statistics, segment embeddings,
one global set of GP hyperparameters, then the partitioned GP models seeded
with all historical reports.

Online: each query first lets the model index fold in buffered reports if
the update window changed, then walks the path with average travel times
to approximate per-segment departure times, batches the GP predictions per
model and sums the de-standardized means.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import embeddings as emb
from . import gpcore
from .gpcore import Hyperparameters, NumericalError
from .network import (
    DAY_S,
    DEFAULT_SPEED_MPS,
    N_AVG_WINDOWS,
    SIGMA_FLOOR_S,
    AvgTravelTimeTable,
    RoadNetwork,
    SegmentStats,
    TravelTimeReport,
    ValidationError,
    compute_avg_travel_time,
    compute_segment_stats,
    destandardize,
    fmt_float,
    report_order,
)
from .partition import ModelIndex, PartitionConfig
from .pathlets import PathletDictionary, decompose

logger = logging.getLogger(__name__)

MIN_SEGMENT_TT_S = 1.0


@dataclass(frozen=True)
class EngineConfig:
    dim: int = emb.DEFAULT_DIM
    lr: float = emb.DEFAULT_LR
    lam: float = emb.DEFAULT_LAMBDA
    epochs: int = emb.DEFAULT_EPOCHS
    seed: int = emb.DEFAULT_SEED
    hp_subsample: int = 1024  # points across all sampled models
    hp_models: int = 8  # busiest models whose likelihoods are summed
    optimize_hp: bool = True
    hp_method: str = "lbfgs"
    sigma_floor: float = SIGMA_FLOOR_S
    default_speed: float = DEFAULT_SPEED_MPS
    partition: PartitionConfig = field(default_factory=PartitionConfig)

    _KEYS = {
        "embedding_dim": ("dim", int),
        "sgd_lr": ("lr", float),
        "sgd_lambda": ("lam", float),
        "sgd_epochs": ("epochs", int),
        "seed": ("seed", int),
        "hp_subsample": ("hp_subsample", int),
        "hp_models": ("hp_models", int),
        "optimize_hp": ("optimize_hp", lambda s: s.lower() in ("1", "true", "yes")),
        "hp_method": ("hp_method", str),
        "sigma_floor_s": ("sigma_floor", float),
        "default_speed_mps": ("default_speed", float),
    }

    @classmethod
    def from_mapping(cls, kv: dict) -> "EngineConfig":
        args = {name: conv(kv[key]) for key, (name, conv) in cls._KEYS.items() if key in kv}
        return cls(partition=PartitionConfig.from_mapping(kv), **args)

    def to_mapping(self) -> dict[str, str]:
        out = {key: str(getattr(self, name)) for key, (name, _) in self._KEYS.items()}
        p = self.partition
        out.update(
            cell_size_m=str(p.cell_size), spatial_overlap_m=str(p.spatial_overlap), window_min=str(p.window_len),
            temporal_overlap_min=str(p.temporal_overlap), max_points_per_model=str(p.max_points_per_model),
            realtime_reserve=str(p.realtime_reserve),
        )
        return out


@dataclass(frozen=True)
class Query:
    id: int
    path: tuple[int, ...]
    t_dep: float
    actual_tt: float | None = None

    def __post_init__(self):
        if not self.path:
            raise ValidationError(f"query {self.id}: empty path")
        object.__setattr__(self, "path", tuple(self.path))


@dataclass(frozen=True)
class SubQuery:
    segment_id: int
    t: float


@dataclass
class Estimate:
    query_id: int
    total_tt: float
    per_segment: list[tuple[int, float, float]]
    fallback_count: int = 0

    @property
    def sub_queries(self) -> int:
        return len(self.per_segment)


@dataclass
class Engine:
    """Everything the online stage needs. ``net`` is the network of
    estimation units: road segments, or pathlets when ``pathlets`` is set."""

    net: RoadNetwork
    tt_avg: AvgTravelTimeTable
    stats: SegmentStats
    embeddings: dict[int, np.ndarray]
    hp: Hyperparameters
    index: ModelIndex
    config: EngineConfig = field(default_factory=EngineConfig)
    pathlets: PathletDictionary | None = None

    def units(self, path: Sequence[int]) -> list[int]:
        """Map a road-segment path to estimation units."""
        return decompose(path, self.pathlets) if self.pathlets is not None else list(path)

    def save(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_tt_avg(self.tt_avg, out / "tt_avg.csv")
        save_stats(self.stats, out / "segment_stats.csv")
        emb.save_embeddings(self.embeddings, out / "embeddings.csv")
        self.hp.save(out / "hyperparameters.csv")
        with open(out / "engine.cfg", "w") as f:
            for k, v in sorted(self.config.to_mapping().items()):
                f.write(f"{k}={v}\n")


# -- offline stage ------------------------------------------------------------

def hp_training_sample(reports: Sequence[TravelTimeReport], index: ModelIndex, size: int, n_models: int = 1) -> list[list[TravelTimeReport]]:
    """The most recent ``size // n_models`` reports of each of the
    ``n_models`` most populated models.

    A contiguous block keeps the time density of the full model, so the
    short-range terms of the kernel are fitted at the spacing they will be
    used at. Evenly thinned samples make near-coincident reports look less
    redundant than they are and the fitted kernel then overfits dense models.
    """
    buckets: dict = defaultdict(list)
    for r in reports:
        if r.segment_id not in index.segment_cell:
            continue
        buckets[index.route_query(r.segment_id, r.t_exit)].append(r)
    keys = sorted(sorted(buckets), key=lambda k: -len(buckets[k]))[:n_models]
    per = max(2, size // max(1, n_models))
    return [sorted(buckets[key], key=report_order)[-per:] for key in keys]


def offline_init(
    reports: Sequence[TravelTimeReport],
    net: RoadNetwork,
    config: EngineConfig = EngineConfig(),
    out_dir=None,
    hp: Hyperparameters | None = None,
    pathlets: PathletDictionary | None = None,
) -> Engine:
    """Build the engine from historical reports keyed by ``net``'s unit ids.

    Passing ``hp`` skips hyperparameter fitting.
    """
    reports = sorted(reports, key=report_order)
    if not reports:
        raise ValidationError("offline initialization needs at least one historical report")
    tt_avg = compute_avg_travel_time(reports, net, config.default_speed)
    stats = compute_segment_stats(reports, net, config.sigma_floor, config.default_speed)
    matrix = emb.build_matrix(reports, stats)
    eset = emb.factorize(matrix, config.dim, config.lr, config.lam, config.epochs, config.seed)
    vectors = emb.segment_embeddings(eset, net)

    hp0 = Hyperparameters()
    index = ModelIndex(net, vectors, stats, hp0, config.partition)
    if hp is None:
        hp = hp0
        if config.optimize_hp:
            blocks = hp_training_sample(reports, index, config.hp_subsample, config.hp_models)
            sample = [r for b in blocks for r in b]
            if len(sample) >= 2:
                t, E, y, _ = index._arrays(sample)
                groups = np.repeat(np.arange(len(blocks)), [len(b) for b in blocks])
                try:
                    hp = gpcore.optimize_hyperparameters(t, E, y, hp0, method=config.hp_method, groups=groups)
                except NumericalError as exc:
                    logger.warning("hyperparameter fitting failed (%s); using the initial values", exc)
    index.hp = hp
    index.seed(reports)
    engine = Engine(net, tt_avg, stats, vectors, hp, index, config, pathlets)
    if out_dir is not None:
        engine.save(out_dir)
    return engine


def rebuild_engine(model_dir, reports: Sequence[TravelTimeReport], net: RoadNetwork, pathlets: PathletDictionary | None = None) -> Engine:
    """Reload persisted artifacts and re-seed the GP models from history."""
    from .partition import read_config

    d = Path(model_dir)
    config = EngineConfig.from_mapping(read_config(d / "engine.cfg"))
    tt_avg = load_tt_avg(d / "tt_avg.csv", net, config.default_speed)
    stats = load_stats(d / "segment_stats.csv")
    vectors = emb.load_embeddings(d / "embeddings.csv")
    hp = Hyperparameters.load(d / "hyperparameters.csv")
    index = ModelIndex(net, vectors, stats, hp, config.partition).seed(sorted(reports, key=report_order))
    return Engine(net, tt_avg, stats, vectors, hp, index, config, pathlets)


# -- online stage ---------------------------------------------------------------

def decompose_path(path: Sequence[int], t_dep: float, tt_avg: AvgTravelTimeTable) -> list[SubQuery]:
    """Approximate departure time at every path element from average travel times."""
    out, t = [], t_dep
    for seg in path:
        out.append(SubQuery(seg, t))
        t = t + tt_avg.at(seg, t)
    return out


def estimate(engine: Engine, query: Query, now: float | None = None) -> Estimate:
    engine.index.window_tick(query.t_dep if now is None else now)
    units = engine.units(query.path)
    missing = [u for u in units if u not in engine.net]
    if missing:
        raise ValidationError(f"query {query.id}: unknown segment {missing[0]}")
    subs = decompose_path(units, query.t_dep, engine.tt_avg)

    groups: dict = defaultdict(list)
    for i, sq in enumerate(subs):
        groups[engine.index.route_query(sq.segment_id, sq.t)].append(i)

    per = [None] * len(subs)
    fallbacks = 0
    for key, idx in groups.items():
        model = engine.index.model_for(key)
        if model is None:
            for i in idx:
                sq = subs[i]
                per[i] = (sq.segment_id, engine.tt_avg.at(sq.segment_id, sq.t), engine.stats.std[sq.segment_id] ** 2)
            fallbacks += len(idx)
            continue
        t = np.array([subs[i].t / DAY_S for i in idx])
        E = np.array([engine.embeddings[subs[i].segment_id] for i in idx])
        mean, var = gpcore.predict(model, t, E)
        for i, mu, v in zip(idx, mean, var):
            seg = subs[i].segment_id
            sd = engine.stats.std[seg]
            per[i] = (seg, max(destandardize(float(mu), seg, engine.stats), MIN_SEGMENT_TT_S), float(v) * sd * sd)
    return Estimate(query.id, math.fsum(p[1] for p in per), per, fallbacks)


def historical_average(engine_or_table, query: Query, units: Sequence[int] | None = None) -> float:
    tt_avg = engine_or_table.tt_avg if isinstance(engine_or_table, Engine) else engine_or_table
    path = query.path if units is None else units
    return math.fsum(tt_avg.at(sq.segment_id, sq.t) for sq in decompose_path(path, query.t_dep, tt_avg))


# -- replay ---------------------------------------------------------------------

@dataclass
class ReplayRow:
    query_id: int
    total_tt: float
    fallback_count: int
    actual_tt: float | None
    latency_ms: float
    sub_queries: int


@dataclass
class Metrics:
    mae: float
    rmse: float
    mape: float
    count: int

    @classmethod
    def from_pairs(cls, est: Sequence[float], act: Sequence[float]) -> "Metrics":
        e, a = np.asarray(est, float), np.asarray(act, float)
        if len(a) == 0:
            return cls(math.nan, math.nan, math.nan, 0)
        err = e - a
        return cls(float(np.mean(np.abs(err))), float(np.sqrt(np.mean(err**2))), float(100 * np.mean(np.abs(err) / a)), len(a))


def _check_sorted(times: Sequence[float], what: str):
    for a, b in zip(times, times[1:]):
        if b < a:
            raise ValidationError(f"{what} stream out of order at timestamp {b!r}")


def replay(engine: Engine, reports: Sequence[TravelTimeReport], queries: Sequence[Query], query_lead: float = 0.0) -> tuple[list[ReplayRow], Metrics]:
    """Merge report and query streams by time and answer every query.

    A report is visible to a query iff its exit time is <= the query's
    arrival time (``t_dep - query_lead``).
    """
    _check_sorted([r.t_exit for r in reports], "report")
    _check_sorted([q.t_dep for q in queries], "query")
    rows = []
    i = 0
    for q in queries:
        arrival = q.t_dep - query_lead
        while i < len(reports) and reports[i].t_exit <= arrival:
            engine.index.ingest(reports[i])
            i += 1
        t0 = time.perf_counter()
        est = estimate(engine, q, now=arrival)
        ms = (time.perf_counter() - t0) * 1e3
        rows.append(ReplayRow(q.id, est.total_tt, est.fallback_count, q.actual_tt, ms, est.sub_queries))
    scored = [r for r in rows if r.actual_tt is not None]
    return rows, Metrics.from_pairs([r.total_tt for r in scored], [r.actual_tt for r in scored])


# -- files --------------------------------------------------------------------------

def read_queries(path) -> list[Query]:
    out = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            act = r.get("actual_tt_s")
            out.append(Query(int(r["query_id"]), tuple(int(s) for s in r["segment_ids"].split(";")), float(r["t_dep_epoch_s"]), float(act) if act else None))
    return out


def write_queries(queries: Iterable[Query], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "t_dep_epoch_s", "segment_ids", "actual_tt_s"])
        for q in queries:
            w.writerow([q.id, fmt_float(q.t_dep), ";".join(map(str, q.path)), "" if q.actual_tt is None else fmt_float(q.actual_tt)])


def write_estimates(rows: Iterable[ReplayRow], path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["query_id", "total_tt_s", "fallback_count", "actual_tt_s", "abs_err_s"])
        for r in sorted(rows, key=lambda r: r.query_id):
            if r.actual_tt is None:
                w.writerow([r.query_id, fmt_float(r.total_tt), r.fallback_count, "", ""])
            else:
                w.writerow([r.query_id, fmt_float(r.total_tt), r.fallback_count, fmt_float(r.actual_tt), fmt_float(abs(r.total_tt - r.actual_tt))])


def read_estimates(path) -> list[tuple[int, float, float | None]]:
    with open(path, newline="") as f:
        return [
            (int(r["query_id"]), float(r["total_tt_s"]), float(r["actual_tt_s"]) if r.get("actual_tt_s") else None)
            for r in csv.DictReader(f)
        ]


def save_tt_avg(table: AvgTravelTimeTable, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["segment_id", "window", "mean_tt_s"])
        for (seg, win) in sorted(table.cells):
            w.writerow([seg, win, fmt_float(table.cells[(seg, win)])])
        for seg in sorted(table.overall):
            w.writerow([seg, "all", fmt_float(table.overall[seg])])


def load_tt_avg(path, net: RoadNetwork | None = None, default_speed: float = DEFAULT_SPEED_MPS) -> AvgTravelTimeTable:
    cells, overall = {}, {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            if r["window"] == "all":
                overall[int(r["segment_id"])] = float(r["mean_tt_s"])
            else:
                w = int(r["window"])
                if not 0 <= w < N_AVG_WINDOWS:
                    raise ValidationError(f"window {w} out of range")
                cells[(int(r["segment_id"]), w)] = float(r["mean_tt_s"])
    lengths = {} if net is None else {i: s.length for i, s in net.segments.items()}
    return AvgTravelTimeTable(cells, overall, lengths, default_speed)


def save_stats(stats: SegmentStats, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["segment_id", "mean_tt_s", "std_tt_s", "count"])
        for seg in sorted(stats.mean):
            w.writerow([seg, fmt_float(stats.mean[seg]), fmt_float(stats.std[seg]), stats.count[seg]])


def load_stats(path) -> SegmentStats:
    mean, std, count = {}, {}, {}
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            s = int(r["segment_id"])
            mean[s], std[s], count[s] = float(r["mean_tt_s"]), float(r["std_tt_s"]), int(r["count"])
    return SegmentStats(mean, std, count)
