"""
Controlled synthetic benchmarks: HTTE against the pure-historical and
pure-real-time baselines, segment vs pathlet granularity, and query latency.

Used by the experiment scripts and the acceptance tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import baselines, synth
from . import pathlets as pl
from .estimator import EngineConfig, Query, estimate, offline_init, replay
from .network import report_order


@dataclass
class HybridResult:
    seed: int
    errors: dict[str, np.ndarray]  # method -> absolute error per query
    incident: np.ndarray  # bool per query
    latency_ms: np.ndarray
    init_s: float

    def mae(self, method: str, subset: np.ndarray | None = None) -> float:
        e = self.errors[method]
        return float(e[subset].mean() if subset is not None else e.mean())


def hybrid_run(seed: int, config: EngineConfig = EngineConfig(), city_config: synth.SynthConfig | None = None) -> HybridResult:
    """Train on the history of one synthetic city and replay its test day."""
    city = synth.generate(city_config or synth.SynthConfig(seed=seed))
    hist, stream = city.reports(True), city.reports(False)
    t0 = time.perf_counter()
    engine = offline_init(hist, city.net, config)
    init_s = time.perf_counter() - t0
    rows, _ = replay(engine, stream, city.queries)
    actual = np.array([q.actual_tt for q in city.queries])
    est = {
        "htte": np.array([r.total_tt for r in rows]),
        "historical-avg": np.array(baselines.historical_avg(engine.tt_avg, city.queries)),
        "last-value": np.array(baselines.last_value(engine.tt_avg, hist + stream, city.queries)),
    }
    return HybridResult(
        seed,
        {k: np.abs(v - actual) for k, v in est.items()},
        np.array([synth.query_hits_incident(q, city) for q in city.queries]),
        np.array([r.latency_ms for r in rows]),
        init_s,
    )


def pooled(results: list[HybridResult], method: str, incident_only: bool = False) -> float:
    """MAE over the union of all runs' queries."""
    errs = [r.errors[method][r.incident] if incident_only else r.errors[method] for r in results]
    return float(np.concatenate(errs).mean())


@dataclass
class PathletResult:
    dictionary: pl.PathletDictionary
    subq_segments: float
    subq_pathlets: float
    mae_segments: float
    mae_pathlets: float
    query_paths: list[tuple[int, ...]]

    @property
    def dictionary_size(self) -> int:
        return len(self.dictionary)

    @property
    def reduction(self) -> float:
        return self.subq_segments / self.subq_pathlets

    @property
    def degradation(self) -> float:
        return self.mae_pathlets / self.mae_segments - 1


def pathlet_run(seed: int, min_support: int = 5, config: EngineConfig = EngineConfig()) -> PathletResult:
    city = synth.generate(synth.SynthConfig(seed=seed))
    engine = offline_init(city.reports(True), city.net, config)
    rows, m = replay(engine, city.reports(False), city.queries)

    pd = pl.build_dictionary(city.probe_trajectories(True), min_support)
    pnet = pl.pathlet_network(city.net, pd)
    hist = sorted(pl.pathlet_reports(city.probe_trajectories(True), pd), key=report_order)
    stream = sorted(pl.pathlet_reports(city.probe_trajectories(False), pd), key=report_order)
    pengine = offline_init(hist, pnet, config, pathlets=pd)
    prows, pm = replay(pengine, stream, city.queries)
    return PathletResult(
        pd,
        float(np.mean([r.sub_queries for r in rows])),
        float(np.mean([r.sub_queries for r in prows])),
        m.mae,
        pm.mae,
        [q.path for q in city.queries],
    )


def random_paths(net, n: int, length: int, rng) -> list[tuple[int, ...]]:
    """Simple (no repeated segment) random walks of exactly ``length`` segments."""
    ids = net.ids()
    out = []
    while len(out) < n:
        p = [ids[int(rng.integers(len(ids)))]]
        while len(p) < length:
            nxt = [s for s in net[p[-1]].successors if s not in p]
            if not nxt:
                break
            p.append(nxt[int(rng.integers(len(nxt)))])
        if len(p) == length:
            out.append(tuple(p))
    return out


def latency_run(seed: int = 7, path_len: int = 20, config: EngineConfig = EngineConfig()) -> np.ndarray:
    """estimate() latency (ms) for ``path_len``-segment paths replayed at the
    test-day query times, reports ingested as they arrive."""
    city = synth.generate(synth.SynthConfig(seed=seed))
    engine = offline_init(city.reports(True), city.net, config)
    rng = np.random.default_rng(seed)
    paths = random_paths(city.net, len(city.queries), path_len, rng)
    stream = city.reports(False)
    out, i = [], 0
    for q, path in zip(city.queries, paths):
        while i < len(stream) and stream[i].t_exit <= q.t_dep:
            engine.index.ingest(stream[i])
            i += 1
        t0 = time.perf_counter()
        estimate(engine, Query(q.id, path, q.t_dep))
        out.append((time.perf_counter() - t0) * 1e3)
    return np.array(out)
