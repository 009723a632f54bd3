"""Command-line entry point: ``htte <subcommand>``.

Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import baselines, synth
from .estimator import (
    EngineConfig,
    Metrics,
    offline_init,
    read_estimates,
    read_queries,
    rebuild_engine,
    replay,
    write_estimates,
)
from .gpcore import NumericalError
from .network import (
    ValidationError,
    compute_avg_travel_time,
    match_nearest,
    read_network,
    read_reports,
    read_trajectories,
    read_visits,
    report_order,
    write_visits,
)
from .partition import read_config
from .pathlets import PathletDictionary, build_dictionary, pathlet_network, pathlet_reports

logger = logging.getLogger("htte")

PARTITION_FLAGS = {
    "cell_size_m": float,
    "spatial_overlap_m": float,
    "window_min": int,
    "temporal_overlap_min": int,
    "max_points_per_model": int,
}


def _settings(args) -> dict[str, str]:
    kv = read_config(args.config) if args.config else {}
    for key in PARTITION_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            kv[key] = str(v)
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        kv[key.strip()] = value.strip()
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    return kv


def _units(args, net, visits_path, reports_path):
    """Network and reports at segment or pathlet granularity."""
    if not args.pathlets:
        return net, read_reports(reports_path), None
    if not visits_path:
        raise ValidationError("--pathlets needs map-matched visits to derive pathlet reports")
    pd = PathletDictionary.load(args.pathlets)
    return pathlet_network(net, pd), sorted(pathlet_reports(read_visits(visits_path), pd), key=report_order), pd


def cmd_synth(args):
    kv = _settings(args)
    cfg = synth.SynthConfig(
        rows=args.rows, cols=args.cols, days=args.days, vehicles=args.vehicles,
        sample_prob=args.sample_prob, n_queries=args.n_queries, seed=int(kv.get("seed", 7)),
        noise_sigma=args.noise_sigma,
    )
    if args.incidents:
        cfg.incidents = _read_incidents(args.incidents)
    city = synth.generate(cfg)
    city.save(args.out)
    print(f"wrote synthetic city to {args.out}: {len(city.net)} segments, {len(city.trips)} trips, {len(city.queries)} queries")


def _read_incidents(path):
    import csv

    with open(path, newline="") as f:
        return [
            synth.Incident(int(r["segment_id"]), float(r["start_epoch_s"]), float(r["duration_s"]), float(r["slowdown"]))
            for r in csv.DictReader(f)
        ]


def cmd_match(args):
    net = read_network(args.network)
    out = []
    for raw in read_trajectories(args.trajectories):
        out.extend(match_nearest(raw, net, args.max_match_dist))
    write_visits(out, args.out)
    print(f"matched {len(out)} trajectories")


def cmd_pathlets(args):
    trajs = read_visits(args.visits)
    pd = build_dictionary(trajs, args.min_support, args.max_len)
    pd.save(args.out)
    print(f"dictionary: {len(pd)} pathlets from {len(trajs)} trajectories")


def cmd_train(args):
    config = EngineConfig.from_mapping(_settings(args))
    net, reports, pd = _units(args, read_network(args.network), args.visits, args.reports)
    t0 = time.perf_counter()
    engine = offline_init(reports, net, config, out_dir=args.out, pathlets=pd)
    print(f"trained on {len(reports)} reports in {time.perf_counter() - t0:.1f}s; {len(engine.index.models)} models; artifacts in {args.out}")


def cmd_replay(args):
    net = read_network(args.network)
    net_u, history, pd = _units(args, net, args.visits, args.history)
    if pd is not None:
        if not args.visits_stream:
            raise ValidationError("--pathlets replay needs --visits-stream")
        stream = sorted(pathlet_reports(read_visits(args.visits_stream), pd), key=report_order)
    else:
        stream = read_reports(args.reports)
    engine = rebuild_engine(args.model_dir, history, net_u, pd)
    queries = sorted(read_queries(args.queries), key=lambda q: (q.t_dep, q.id))
    rows, metrics = replay(engine, stream, queries, args.query_lead)
    write_estimates(rows, args.out)
    lat = np.array([r.latency_ms for r in rows]) if rows else np.zeros(1)
    summary = {
        "method": "htte",
        "queries": len(rows),
        "mae_s": metrics.mae,
        "rmse_s": metrics.rmse,
        "mape_pct": metrics.mape,
        "scored": metrics.count,
        "mean_latency_ms": float(lat.mean()),
        "median_latency_ms": float(np.median(lat)),
        "p99_latency_ms": float(np.percentile(lat, 99)),
        "mean_sub_queries": float(np.mean([r.sub_queries for r in rows])) if rows else 0.0,
    }
    if args.metrics:
        Path(args.metrics).write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))


def cmd_evaluate(args):
    rows = read_estimates(args.estimates)
    scored = [(e, a) for _, e, a in rows if a is not None]
    m = Metrics.from_pairs([e for e, _ in scored], [a for _, a in scored])
    print(json.dumps({"queries": len(rows), "scored": m.count, "mae_s": m.mae, "rmse_s": m.rmse, "mape_pct": m.mape}, indent=2))


def cmd_baseline(args):
    net = read_network(args.network)
    history = read_reports(args.history)
    stream = read_reports(args.reports) if args.reports else []
    queries = read_queries(args.queries)
    tt_avg = compute_avg_travel_time(history, net)
    est = baselines.run_baseline(args.name, tt_avg, history + stream, queries)
    scored = [(e, q.actual_tt) for e, q in zip(est, queries) if q.actual_tt is not None]
    m = Metrics.from_pairs([e for e, _ in scored], [a for _, a in scored])
    if args.out:
        from .estimator import ReplayRow

        write_estimates([ReplayRow(q.id, e, 0, q.actual_tt, 0.0, len(q.path)) for q, e in zip(queries, est)], args.out)
    print(json.dumps({"method": args.name, "queries": len(queries), "scored": m.count, "mae_s": m.mae, "rmse_s": m.rmse, "mape_pct": m.mape}, indent=2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="htte", description="Hybrid GP travel-time estimation.")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--pathlets", help="pathlet dictionary CSV; switches to pathlet granularity")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic lattice city")
    s.add_argument("--out", required=True)
    s.add_argument("--rows", type=int, default=8)
    s.add_argument("--cols", type=int, default=8)
    s.add_argument("--days", type=int, default=15)
    s.add_argument("--vehicles", type=int, default=600)
    s.add_argument("--sample-prob", type=float, default=0.1)
    s.add_argument("--n-queries", type=int, default=300)
    s.add_argument("--noise-sigma", type=float, default=0.15)
    s.add_argument("--incidents", help="CSV segment_id,start_epoch_s,duration_s,slowdown (default: two automatic)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("match", help="nearest-segment map matching of raw GPS trajectories")
    s.add_argument("--network", required=True)
    s.add_argument("--trajectories", required=True)
    s.add_argument("--max-match-dist", type=float, default=50.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("pathlets", help="build a pathlet dictionary from map-matched visits")
    s.add_argument("--visits", required=True)
    s.add_argument("--min-support", type=int, default=5)
    s.add_argument("--max-len", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pathlets)

    def partition_flags(sp):
        for key, typ in PARTITION_FLAGS.items():
            sp.add_argument("--" + key.replace("_", "-"), dest=key, type=typ)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    s = sub.add_parser("train", help="offline stage: averages, stats, embeddings, hyperparameters")
    s.add_argument("--network", required=True)
    s.add_argument("--reports", required=True, help="historical reports CSV")
    s.add_argument("--visits", help="historical map-matched visits (pathlet mode)")
    s.add_argument("--out", required=True, help="model directory")
    partition_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("replay", help="streaming evaluation over report and query streams")
    s.add_argument("--network", required=True)
    s.add_argument("--model-dir", required=True)
    s.add_argument("--history", required=True, help="historical reports used to seed the models")
    s.add_argument("--reports", help="real-time report stream CSV")
    s.add_argument("--visits", help="historical visits (pathlet mode)")
    s.add_argument("--visits-stream", help="real-time visits (pathlet mode)")
    s.add_argument("--queries", required=True)
    s.add_argument("--query-lead", type=float, default=0.0, help="seconds a query arrives before its departure")
    s.add_argument("--out", required=True, help="estimates CSV")
    s.add_argument("--metrics", help="write summary JSON here")
    s.set_defaults(func=cmd_replay)

    s = sub.add_parser("evaluate", help="metrics from an estimates CSV")
    s.add_argument("--estimates", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("baseline", help="historical-avg or last-value reference estimates")
    s.add_argument("--name", required=True)
    s.add_argument("--network", required=True)
    s.add_argument("--history", required=True)
    s.add_argument("--reports", help="real-time reports (last-value)")
    s.add_argument("--queries", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (ValidationError, KeyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
