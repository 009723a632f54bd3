import math

import numpy as np
import pytest
from conftest import chain_network
from hypothesis import given, settings
from hypothesis import strategies as st

from htte import synth
from htte.network import (
    DAY_S,
    MapMatchedTrajectory,
    RawTrajectory,
    RoadNetwork,
    RoadSegment,
    SegmentStats,
    StaleStatsError,
    TravelTimeReport,
    ValidationError,
    Visit,
    compute_avg_travel_time,
    compute_segment_stats,
    destandardize,
    extract_reports,
    match_nearest,
    read_network,
    read_reports,
    read_trajectories,
    read_visits,
    standardize,
    write_network,
    write_reports,
    write_trajectories,
    write_visits,
)

GEOM = ((23.7, 38.0), (23.701, 38.0))


def test_segment_invariants():
    with pytest.raises(ValidationError):
        RoadSegment(1, GEOM, 0.0)
    with pytest.raises(ValidationError):
        RoadSegment(1, GEOM[:1], 10.0)


def test_network_rejects_dangling_successor_and_duplicates():
    with pytest.raises(ValidationError):
        RoadNetwork([RoadSegment(1, GEOM, 10.0, (2,))])
    with pytest.raises(ValidationError):
        RoadNetwork([RoadSegment(1, GEOM, 10.0), RoadSegment(1, GEOM, 20.0)])


def test_network_adjacency():
    net = chain_network(3)
    assert net.adjacent(0, 1) and not net.adjacent(1, 0)
    assert net.neighbors(1) == [0, 2]
    net.check_path([0, 1, 2])
    with pytest.raises(ValidationError):
        net.check_path([0, 2])


def test_anchor_is_polyline_midpoint():
    net = chain_network(1)
    lon, lat = net.anchor(0)
    assert lon == pytest.approx(23.7005, abs=1e-9)
    assert lat == pytest.approx(38.0, abs=1e-9)


def test_extract_reports_examples():
    assert extract_reports(MapMatchedTrajectory("v", [Visit(7, 100, 160)])) == [TravelTimeReport(7, 160, 60)]
    assert extract_reports(MapMatchedTrajectory("v", [])) == []
    rs = extract_reports(MapMatchedTrajectory("v", [Visit(1, 0, 30), Visit(2, 30, 90)]))
    assert [r.travel_time for r in rs] == [30, 60]


def test_extract_reports_rejects_bad_visit():
    with pytest.raises(ValidationError, match="visit 1"):
        extract_reports(MapMatchedTrajectory("v", [Visit(1, 0, 30), Visit(2, 30, 30)]))


@given(st.lists(st.floats(0.5, 500), min_size=1, max_size=20), st.floats(0, 1e9))
def test_extract_reports_contiguous_sum(durations, t0):
    visits, t = [], t0
    for i, d in enumerate(durations):
        visits.append(Visit(i, t, t + d))
        t += d
    rs = extract_reports(MapMatchedTrajectory("v", visits))
    assert len(rs) == len(visits)
    assert math.fsum(r.travel_time for r in rs) == pytest.approx(visits[-1].t_out - visits[0].t_in, rel=1e-9)


def test_travel_time_must_be_positive():
    with pytest.raises(ValidationError):
        TravelTimeReport(1, 10.0, 0.0)


def test_segment_stats_examples():
    st_ = compute_segment_stats([TravelTimeReport(1, 0, 60), TravelTimeReport(1, 1, 60)])
    assert st_.mean[1] == 60 and st_.std[1] == 1.0
    st_ = compute_segment_stats([TravelTimeReport(1, 0, 50), TravelTimeReport(1, 1, 70)])
    assert st_.mean[1] == 60 and st_.std[1] == 10
    net = RoadNetwork([RoadSegment(1, GEOM, 100.0, (2,)), RoadSegment(2, GEOM, 80.0)])
    st_ = compute_segment_stats([TravelTimeReport(1, 0, 50)], net)
    assert st_.mean[2] == 10 and st_.std[2] == 1.0 and st_.count[2] == 0


def test_avg_travel_time_examples():
    day = 3 * DAY_S
    rs = [TravelTimeReport(1, day + 10 * 3600 + 300, 40), TravelTimeReport(1, day + 10 * 3600 + 1200, 60)]
    tab = compute_avg_travel_time(rs)
    assert tab.get(1, 20) == 50
    # empty window falls back to the overall mean
    tab = compute_avg_travel_time(rs + [TravelTimeReport(1, day + 3600, 65)])
    assert tab.get(1, 30) == 55
    # same clock time on different days pools into one cell
    tab = compute_avg_travel_time([TravelTimeReport(1, 600, 30), TravelTimeReport(1, DAY_S + 600, 50)])
    assert tab.get(1, 0) == 40


def test_avg_travel_time_free_flow_fallback_and_errors():
    net = chain_network(2, length=80.0)
    tab = compute_avg_travel_time([], net)
    assert tab.get(0, 5) == 10.0
    with pytest.raises(ValueError):
        tab.get(0, 48)
    with pytest.raises(StaleStatsError):
        tab.get(99, 0)


@given(st.lists(st.tuples(st.integers(0, 3), st.floats(0, 10 * DAY_S), st.floats(1, 1000)), min_size=1, max_size=40))
def test_avg_cells_within_report_range(rows):
    rs = [TravelTimeReport(s, t, tt) for s, t, tt in rows]
    tab = compute_avg_travel_time(rs)
    for (seg, w), v in tab.cells.items():
        vals = [r.travel_time for r in rs if r.segment_id == seg and int((r.t_exit % DAY_S) // 1800) == w]
        assert min(vals) - 1e-9 <= v <= max(vals) + 1e-9


def test_standardize_examples():
    s = SegmentStats({1: 100.0}, {1: 20.0}, {1: 5})
    assert standardize(100.0, 1, s) == 0
    assert standardize(140.0, 1, s) == 2
    assert destandardize(standardize(73.25, 1, s), 1, s) == pytest.approx(73.25, abs=1e-9)
    with pytest.raises(StaleStatsError):
        standardize(1.0, 2, s)
    with pytest.raises(StaleStatsError):
        destandardize(1.0, 2, s)


@given(st.floats(-1e4, 1e4), st.floats(1e-3, 1e4), st.floats(1.0, 1e5))
def test_standardize_round_trip(mean, std, tt):
    s = SegmentStats({1: mean}, {1: std}, {1: 1})
    assert destandardize(standardize(tt, 1, s), 1, s) == pytest.approx(tt, rel=1e-9, abs=1e-9)


def test_stats_superset_leaves_reports_untouched():
    rs = [TravelTimeReport(1, float(i), 10.0 + i) for i in range(5)]
    before = list(rs)
    compute_segment_stats(rs)
    compute_segment_stats(rs + [TravelTimeReport(1, 9.0, 99.0)])
    assert rs == before


# -- map matching


def _points_along(net, seg, t0, n, lateral_m=0.0):
    xy = net.projection.to_xy(net[seg].geometry)
    a, b = xy[0], xy[-1]
    d = (b - a) / np.linalg.norm(b - a)
    normal = np.array([-d[1], d[0]])
    out = []
    for k, u in enumerate(np.linspace(0.1, 0.9, n)):
        lon, lat = net.projection.to_lonlat(a + u * (b - a) + lateral_m * normal)
        out.append((float(lon), float(lat), t0 + k))
    return out


def test_match_single_segment():
    net = chain_network(3)
    out = match_nearest(RawTrajectory("v", _points_along(net, 1, 0, 4)), net)
    assert len(out) == 1 and out[0].path == [1]
    assert (out[0].visits[0].t_in, out[0].visits[0].t_out) == (0, 3)


def test_match_adjacent_segments():
    net = chain_network(3)
    pts = _points_along(net, 1, 0, 3) + _points_along(net, 2, 10, 3)
    out = match_nearest(RawTrajectory("v", pts), net)
    assert [m.path for m in out] == [[1, 2]]


def test_match_outlier_splits():
    net = chain_network(4)
    pts = _points_along(net, 0, 0, 3) + _points_along(net, 1, 10, 3)
    far = (pts[-1][0], pts[-1][1] + 0.0045, 20.0)  # ~500 m north
    pts += [far] + _points_along(net, 2, 30, 3) + _points_along(net, 3, 40, 3)
    out = match_nearest(RawTrajectory("v", pts), net)
    assert [m.path for m in out] == [[0, 1], [2, 3]]


def test_match_recovers_synthetic_trip():
    net, eid = synth.lattice_network(3, 3)
    path = [eid[((0, 0), (0, 1))], eid[((0, 1), (0, 2))], eid[((0, 2), (1, 2))]]
    visits = [Visit(s, 100.0 * i, 100.0 * i + 60) for i, s in enumerate(path)]
    out = match_nearest(synth.gps_trace(net, MapMatchedTrajectory("v", visits), 10.0), net)
    assert len(out) == 1 and out[0].path == path
    out[0].validate(net)


def test_raw_trajectory_requires_increasing_time():
    with pytest.raises(ValidationError):
        RawTrajectory("v", [(0, 0, 1.0), (0, 0, 1.0)])


# -- files


def test_file_round_trips(tmp_path, lattice):
    net, _ = lattice
    write_network(net, tmp_path / "net.csv")
    net2 = read_network(tmp_path / "net.csv")
    assert net2.ids() == net.ids()
    for s in net.ids():
        assert net2[s].successors == net[s].successors
        assert net2[s].length == net[s].length
        np.testing.assert_allclose(net2[s].geometry, net[s].geometry, atol=1e-12)

    rs = [TravelTimeReport(2, 50.0, 7.5), TravelTimeReport(1, 10.0, 3.25)]
    write_reports(rs, tmp_path / "r.csv")
    assert read_reports(tmp_path / "r.csv") == sorted(rs, key=lambda r: r.t_exit)
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "segment_id,t_exit_epoch_s,travel_time_s"

    tr = [RawTrajectory("a", [(23.7, 38.0, 1.0), (23.71, 38.0, 2.0)])]
    write_trajectories(tr, tmp_path / "t.csv")
    assert read_trajectories(tmp_path / "t.csv") == tr

    mm = [MapMatchedTrajectory("x", [Visit(1, 0.0, 5.0), Visit(2, 5.0, 9.0)])]
    write_visits(mm, tmp_path / "v.csv")
    assert read_visits(tmp_path / "v.csv") == mm


@settings(max_examples=25)
@given(st.lists(st.tuples(st.integers(0, 5), st.floats(0, 1e9, allow_subnormal=False), st.floats(0.001, 1e5)), max_size=30))
def test_reports_file_round_trip_exact(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("r") / "r.csv"
    rs = [TravelTimeReport(*r) for r in rows]
    write_reports(rs, path)
    back = read_reports(path)
    assert sorted(back, key=lambda r: (r.t_exit, r.segment_id, r.travel_time)) == sorted(rs, key=lambda r: (r.t_exit, r.segment_id, r.travel_time))
