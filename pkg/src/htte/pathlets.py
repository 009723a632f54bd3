"""
Pathlet dictionaries: frequent sub-paths used as decomposition units.

The dictionary holds every single-segment pathlet seen in training plus
every contiguous sub-path of length 2..max_len that occurs in at least
``min_support`` distinct trajectories. Decomposition picks the fewest
pathlets whose concatenation reproduces a path exactly.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .network import (
    MapMatchedTrajectory,
    RoadNetwork,
    RoadSegment,
    TravelTimeReport,
    ValidationError,
)

DEFAULT_MAX_PATHLET_LEN = 20
DEFAULT_MIN_SUPPORT = 5


@dataclass(frozen=True)
class Pathlet:
    id: int
    segments: tuple[int, ...]

    def __post_init__(self):
        if not self.segments:
            raise ValidationError(f"pathlet {self.id} is empty")

    def __len__(self):
        return len(self.segments)


class PathletDictionary:
    def __init__(self, pathlets: Iterable[Pathlet]):
        self.pathlets: dict[int, Pathlet] = {}
        self.by_segments: dict[tuple[int, ...], int] = {}
        self.index: dict[int, list[int]] = defaultdict(list)
        for p in pathlets:
            if p.id in self.pathlets or p.segments in self.by_segments:
                raise ValidationError(f"duplicate pathlet {p.id} {p.segments}")
            self.pathlets[p.id] = p
            self.by_segments[p.segments] = p.id
            self.index[p.segments[0]].append(p.id)
        self.max_len = max((len(p) for p in self.pathlets.values()), default=0)

    def __len__(self):
        return len(self.pathlets)

    def __getitem__(self, pid) -> Pathlet:
        return self.pathlets[pid]

    def __contains__(self, segments) -> bool:
        return tuple(segments) in self.by_segments

    def singleton(self, seg_id: int) -> int | None:
        return self.by_segments.get((seg_id,))

    def save(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["pathlet_id", "segment_ids"])
            for pid in sorted(self.pathlets):
                w.writerow([pid, ";".join(map(str, self.pathlets[pid].segments))])

    @classmethod
    def load(cls, path) -> "PathletDictionary":
        with open(path, newline="") as f:
            return cls(
                Pathlet(int(r["pathlet_id"]), tuple(int(s) for s in r["segment_ids"].split(";")))
                for r in csv.DictReader(f)
            )


def count_subpaths(paths: Sequence[Sequence[int]], max_len: int) -> dict[tuple[int, ...], int]:
    """Number of distinct paths containing each sub-path of length 2..max_len."""
    support: dict[tuple[int, ...], int] = defaultdict(int)
    for path in paths:
        seen = set()
        for i in range(len(path)):
            for j in range(i + 2, min(i + max_len, len(path)) + 1):
                seen.add(tuple(path[i:j]))
        for sub in seen:
            support[sub] += 1
    return support


def build_dictionary(
    trajectories: Sequence[MapMatchedTrajectory | Sequence[int]],
    min_support: int = DEFAULT_MIN_SUPPORT,
    max_pathlet_len: int = DEFAULT_MAX_PATHLET_LEN,
) -> PathletDictionary:
    """Singletons first (in first-seen order), then frequent sub-paths by
    length and first occurrence. Ids are assigned in that order."""
    paths = [t.path if isinstance(t, MapMatchedTrajectory) else list(t) for t in trajectories]
    order: dict[tuple[int, ...], int] = {}
    for path in paths:
        for seg in path:
            order.setdefault((seg,), len(order))
    singles = list(order)
    support = count_subpaths(paths, max_pathlet_len)
    first_seen: dict[tuple[int, ...], int] = {}
    for path in paths:
        for i in range(len(path)):
            for j in range(i + 2, min(i + max_pathlet_len, len(path)) + 1):
                first_seen.setdefault(tuple(path[i:j]), len(first_seen))
    frequent = sorted((s for s, c in support.items() if c >= min_support), key=lambda s: (len(s), first_seen[s]))
    return PathletDictionary(Pathlet(i, s) for i, s in enumerate(singles + frequent))


def decompose(path: Sequence[int], pd: PathletDictionary) -> list[int]:
    """Minimum-count decomposition of ``path`` into dictionary pathlets.

    Dynamic program over suffixes; among minimal decompositions the one
    with the longest first pathlet wins (applied recursively).
    """
    path = tuple(path)
    missing = sorted({s for s in path if pd.singleton(s) is None})
    if missing:
        raise ValidationError(f"segments without a pathlet: {missing}")
    n = len(path)
    best = [0] * (n + 1)  # min pathlets to cover path[i:]
    choice: list[int | None] = [None] * (n + 1)
    for i in range(n - 1, -1, -1):
        best[i] = n + 1
        for pid in pd.index.get(path[i], ()):
            segs = pd[pid].segments
            j = i + len(segs)
            if j > n or path[i:j] != segs:
                continue
            cand = 1 + best[j]
            if cand < best[i] or (cand == best[i] and len(segs) > len(pd[choice[i]].segments)):
                best[i], choice[i] = cand, pid
    out, i = [], 0
    while i < n:
        pid = choice[i]
        out.append(pid)
        i += len(pd[pid].segments)
    return out


def pathlet_network(net: RoadNetwork, pd: PathletDictionary) -> RoadNetwork:
    """A network whose 'segments' are pathlets.

    Geometry is the concatenated polyline, length the summed length and a
    pathlet's successors are the pathlets starting at a successor of its
    last segment. The whole estimation pipeline then runs unchanged.
    """
    starts: dict[int, list[int]] = defaultdict(list)
    for pid, p in pd.pathlets.items():
        starts[p.segments[0]].append(pid)
    segs = []
    for pid in sorted(pd.pathlets):
        p = pd[pid]
        geom: list = []
        for s in p.segments:
            g = list(net[s].geometry)
            geom.extend(g if not geom or geom[-1] != g[0] else g[1:])
        succ = sorted(q for s in net[p.segments[-1]].successors for q in starts.get(s, ()))
        segs.append(RoadSegment(pid, tuple(geom), sum(net[s].length for s in p.segments), tuple(succ)))
    out = RoadNetwork(segs)
    # keep the parent projection so grid cells line up with segment granularity
    out.projection = net.projection
    for pid in sorted(pd.pathlets):
        p = pd[pid]
        out._anchor_xy[pid] = net.anchor_xy(p.segments[len(p) // 2])
    return out


def pathlet_reports(trajectories: Iterable[MapMatchedTrajectory], pd: PathletDictionary) -> list[TravelTimeReport]:
    """Reports keyed by pathlet id: one per contiguous traversal of any
    dictionary pathlet, spanning entry into its first segment to exit from
    its last. Overlapping pathlets each get their own report.
    """
    out = []
    for tr in trajectories:
        path = tuple(tr.path)
        for i in range(len(path)):
            for j in range(i + 1, min(i + pd.max_len, len(path)) + 1):
                pid = pd.by_segments.get(path[i:j])
                if pid is not None:
                    out.append(TravelTimeReport(pid, tr.visits[j - 1].t_out, tr.visits[j - 1].t_out - tr.visits[i].t_in))
    return out


def mean_pathlets_per_path(paths: Iterable[Sequence[int]], pd: PathletDictionary) -> float:
    return float(np.mean([len(decompose(p, pd)) for p in paths]))
