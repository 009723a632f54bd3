"""
Latent segment embeddings from a sparse segment x time-window matrix.

Cells hold the per-segment standardized mean travel time in each absolute
30-minute window of the history. SGD matrix factorization M ~ P Q^T gives
one D-vector per segment (rows of P); segments whose travel times rise and
fall together end up close.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable

import numba
import numpy as np

from .gpcore import NumericalError
from .network import AVG_WINDOW_S, RoadNetwork, SegmentStats, TravelTimeReport, standardize

logger = logging.getLogger(__name__)

DEFAULT_DIM = 10
DEFAULT_LR = 0.01
DEFAULT_LAMBDA = 0.05
DEFAULT_EPOCHS = 200
DEFAULT_SEED = 42
REL_TOL = 1e-5
MIN_LR = 1e-12


@dataclass(frozen=True)
class TravelTimeMatrix:
    rows: np.ndarray  # segment row index per observed cell
    cols: np.ndarray  # absolute window index per observed cell
    values: np.ndarray
    segment_ids: tuple[int, ...]
    n_windows: int
    window0: int = 0  # absolute window number of column 0

    @property
    def shape(self):
        return len(self.segment_ids), self.n_windows

    def dense(self) -> np.ndarray:
        out = np.full(self.shape, np.nan)
        out[self.rows, self.cols] = self.values
        return out


@dataclass(frozen=True)
class EmbeddingSet:
    P: np.ndarray
    Q: np.ndarray
    segment_ids: tuple[int, ...]

    @property
    def dim(self) -> int:
        return self.P.shape[1]

    def vectors(self) -> dict[int, np.ndarray]:
        return {s: self.P[i] for i, s in enumerate(self.segment_ids)}


def build_matrix(reports: Iterable[TravelTimeReport], stats: SegmentStats, window_s: float = AVG_WINDOW_S) -> TravelTimeMatrix:
    cells: dict[tuple[int, int], list[float]] = defaultdict(lambda: [0.0, 0])
    for r in reports:
        c = cells[(r.segment_id, int(r.t_exit // window_s))]
        c[0] += r.travel_time
        c[1] += 1
    if not cells:
        return TravelTimeMatrix(np.zeros(0, int), np.zeros(0, int), np.zeros(0), (), 0)
    seg_ids = tuple(sorted({s for s, _ in cells}))
    row_of = {s: i for i, s in enumerate(seg_ids)}
    w0 = min(w for _, w in cells)
    w1 = max(w for _, w in cells)
    keys = sorted(cells)
    rows = np.array([row_of[s] for s, _ in keys])
    cols = np.array([w - w0 for _, w in keys])
    vals = np.array([standardize(cells[k][0] / cells[k][1], k[0], stats) for k in keys])
    return TravelTimeMatrix(rows, cols, vals, seg_ids, w1 - w0 + 1, w0)


@numba.njit(cache=True)
def _sgd_epoch(P, Q, rows, cols, vals, order, lr, lam):
    for k in order:
        i, w = rows[k], cols[k]
        err = vals[k] - P[i] @ Q[w]
        pi = P[i].copy()
        P[i] += lr * (err * Q[w] - lam * pi)
        Q[w] += lr * (err * pi - lam * Q[w])


def _objective(P, Q, m: TravelTimeMatrix, lam: float) -> float:
    pr, qw = P[m.rows], Q[m.cols]
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is checked by the caller
        err = m.values - np.einsum("ij,ij->i", pr, qw)
        reg = np.einsum("ij,ij->i", pr, pr) + np.einsum("ij,ij->i", qw, qw)
        return float(np.mean(err * err + lam * reg))


def factorize(
    m: TravelTimeMatrix,
    d: int = DEFAULT_DIM,
    lr: float = DEFAULT_LR,
    lam: float = DEFAULT_LAMBDA,
    epochs: int = DEFAULT_EPOCHS,
    seed: int = DEFAULT_SEED,
) -> EmbeddingSet:
    """SGD on squared error plus lam*(|p_i|^2 + |q_w|^2) per observed cell.

    An epoch that raises the objective is undone and retried with half the
    learning rate, so the per-epoch objective never increases. Training
    stops after ``epochs`` epochs or once the relative improvement drops
    below 1e-5.
    """
    if d < 1 or lr <= 0 or lam <= 0:
        raise ValueError("need d >= 1 and positive lr, lam")
    rng = np.random.default_rng(seed)
    N, W = m.shape
    P = rng.uniform(-0.1, 0.1, (N, d))
    Q = rng.uniform(-0.1, 0.1, (W, d))
    if len(m.values) == 0:
        return EmbeddingSet(P, Q, m.segment_ids)
    rows, cols = m.rows.astype(np.int64), m.cols.astype(np.int64)
    obj = _objective(P, Q, m, lam)
    for epoch in range(epochs):
        order = rng.permutation(len(m.values))
        P_new, Q_new = P.copy(), Q.copy()
        _sgd_epoch(P_new, Q_new, rows, cols, m.values, order, lr, lam)
        new_obj = _objective(P_new, Q_new, m, lam)
        if not np.isfinite(new_obj):
            raise NumericalError(f"factorization diverged at epoch {epoch}; retry with a smaller learning rate")
        if new_obj > obj:
            lr /= 2
            if lr < MIN_LR:
                break
            continue
        improvement = (obj - new_obj) / max(abs(obj), 1e-300)
        P, Q, obj = P_new, Q_new, new_obj
        if improvement < REL_TOL:
            break
    logger.debug("factorize: objective %.6g after %d epochs", obj, epoch + 1)
    return EmbeddingSet(P, Q, m.segment_ids)


def reconstruction_error(m: TravelTimeMatrix, e: EmbeddingSet) -> float:
    if len(m.values) == 0:
        return 0.0
    pred = np.einsum("ij,ij->i", e.P[m.rows], e.Q[m.cols])
    return float(np.mean((m.values - pred) ** 2))


def segment_embeddings(e: EmbeddingSet, net: RoadNetwork) -> dict[int, np.ndarray]:
    """Embedding for every network segment.

    Segments never observed take the mean embedding of their observed graph
    neighbors, or the zero vector when none are observed.
    """
    known = e.vectors()
    out = dict(known)
    for sid in net.ids():
        if sid in known:
            continue
        nb = [known[n] for n in net.neighbors(sid) if n in known]
        out[sid] = np.mean(nb, axis=0) if nb else np.zeros(e.dim)
    return out


def save_embeddings(vectors: dict[int, np.ndarray], path):
    dim = len(next(iter(vectors.values()))) if vectors else 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["segment_id"] + [f"e{j + 1}" for j in range(dim)])
        for sid in sorted(vectors):
            w.writerow([sid] + [repr(float(v)) for v in vectors[sid]])


def load_embeddings(path) -> dict[int, np.ndarray]:
    with open(path, newline="") as f:
        rd = csv.reader(f)
        next(rd)
        return {int(r[0]): np.array([float(v) for v in r[1:]]) for r in rd}
