"""
Pure-historical and pure-real-time reference estimators.
"""

from __future__ import annotations

import bisect
import math
from collections import defaultdict
from typing import Sequence

from .estimator import Query, decompose_path
from .network import AvgTravelTimeTable, TravelTimeReport, report_order

BASELINES = ("historical-avg", "last-value")


def historical_avg(tt_avg: AvgTravelTimeTable, queries: Sequence[Query]) -> list[float]:
    """Sum of time-of-day averages along each path."""
    return [math.fsum(tt_avg.at(sq.segment_id, sq.t) for sq in decompose_path(q.path, q.t_dep, tt_avg)) for q in queries]


def last_value(tt_avg: AvgTravelTimeTable, reports: Sequence[TravelTimeReport], queries: Sequence[Query]) -> list[float]:
    """Each segment's most recent report exited no later than the query's
    departure; segments never reported fall back to the average table."""
    by_seg: dict[int, tuple[list[float], list[float]]] = defaultdict(lambda: ([], []))
    for r in sorted(reports, key=report_order):
        ts, tts = by_seg[r.segment_id]
        ts.append(r.t_exit)
        tts.append(r.travel_time)
    out = []
    for q in queries:
        total = []
        for sq in decompose_path(q.path, q.t_dep, tt_avg):
            ts, tts = by_seg.get(sq.segment_id, ((), ()))
            i = bisect.bisect_right(ts, q.t_dep) - 1
            total.append(tts[i] if i >= 0 else tt_avg.at(sq.segment_id, sq.t))
        out.append(math.fsum(total))
    return out


def run_baseline(name: str, tt_avg: AvgTravelTimeTable, reports: Sequence[TravelTimeReport], queries: Sequence[Query]) -> list[float]:
    if name == "historical-avg":
        return historical_avg(tt_avg, queries)
    if name == "last-value":
        return last_value(tt_avg, reports, queries)
    raise ValueError(f"unknown baseline {name!r}; choose from {', '.join(BASELINES)}")
