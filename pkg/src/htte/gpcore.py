"""
Zero-mean GP regression over (time, segment embedding) inputs.

Inputs are ``t`` in days (fractional) and an embedding vector ``e``. The
covariance is the sum of three terms:

    k1: quasi-periodic daily term, damped by a slow squared exponential on
        time and a squared exponential on embedding distance
    k2: rational quadratic in time times squared exponential on embeddings
    k3: short-range squared exponential in both time and embedding

Hyperparameters are kept as the 11 positive scales ``theta`` plus a fixed
diagonal ``jitter``. Optimization happens over ``log(theta)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

N_THETA = 11
THETA_NAMES = tuple(f"theta{i}" for i in range(1, N_THETA + 1))
DEFAULT_THETA = (0.5, 30.0, 1.0, 1.0, 0.5, 2.0, 0.05, 1.0, 0.5, 1.0, 0.01)
DEFAULT_JITTER = 1e-6
MAX_JITTER_RETRIES = 3
NEG_VAR_TOL = 1e-8
LOG_THETA_BOUNDS = (np.log(1e-4), np.log(1e4))


class NumericalError(ArithmeticError):
    """A factorization or prediction produced unusable numbers."""


@dataclass(frozen=True)
class Hyperparameters:
    theta: tuple = DEFAULT_THETA
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        theta = tuple(float(v) for v in self.theta)
        if len(theta) != N_THETA:
            raise ValueError(f"need {N_THETA} kernel hyperparameters, got {len(theta)}")
        if not all(v > 0 and np.isfinite(v) for v in theta) or not self.jitter > 0:
            raise ValueError("hyperparameters must be finite and strictly positive")
        object.__setattr__(self, "theta", theta)

    @property
    def log_theta(self) -> np.ndarray:
        return np.log(np.asarray(self.theta))

    @classmethod
    def from_log(cls, log_theta, jitter=DEFAULT_JITTER) -> "Hyperparameters":
        return cls(tuple(np.exp(np.asarray(log_theta, dtype=float))), jitter)

    @property
    def prior_variance(self) -> float:
        th = self.theta
        return th[0] ** 2 + th[4] ** 2 + th[8] ** 2

    def save(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["name", "value"])
            for name, v in zip(THETA_NAMES, self.theta):
                w.writerow([name, repr(float(v))])
            w.writerow(["jitter", repr(float(self.jitter))])

    @classmethod
    def load(cls, path) -> "Hyperparameters":
        with open(path, newline="") as f:
            vals = {r["name"]: float(r["value"]) for r in csv.DictReader(f)}
        return cls(tuple(vals[n] for n in THETA_NAMES), vals.get("jitter", DEFAULT_JITTER))


@dataclass(frozen=True)
class GpInput:
    t: float
    e: tuple


def _sin2_pi(dt):
    # sin^2(pi*dt) has period 1, so reducing dt first is exact at integer offsets
    return np.sin(np.pi * (dt - np.round(dt))) ** 2


# -- scalar kernels -----------------------------------------------------------

def _theta(theta):
    return theta.theta if isinstance(theta, Hyperparameters) else tuple(float(v) for v in theta)


def _dist2(x: GpInput, x2: GpInput) -> tuple[float, float]:
    e, e2 = np.asarray(x.e, dtype=float), np.asarray(x2.e, dtype=float)
    if e.shape != e2.shape:
        raise ValueError("embedding dimensions differ")
    d = e - e2
    return (x.t - x2.t) ** 2, float(d @ d)


def k1(x: GpInput, x2: GpInput, theta) -> float:
    th = _theta(theta)
    dt2, de2 = _dist2(x, x2)
    per = float(_sin2_pi(x.t - x2.t))
    return th[0] ** 2 * float(np.exp(-dt2 / (2 * th[1] ** 2) - de2 / (2 * th[2] ** 2) - 2 * per / th[3] ** 2))


def k2(x: GpInput, x2: GpInput, theta) -> float:
    th = _theta(theta)
    dt2, de2 = _dist2(x, x2)
    return th[4] ** 2 * (1 + dt2 / (2 * th[5] * th[6])) ** (-th[5]) * float(np.exp(-de2 / (2 * th[7] ** 2)))


def k3(x: GpInput, x2: GpInput, theta) -> float:
    th = _theta(theta)
    dt2, de2 = _dist2(x, x2)
    return th[8] ** 2 * float(np.exp(-de2 / (2 * th[9] ** 2) - dt2 / (2 * th[10] ** 2)))


def k(x: GpInput, x2: GpInput, theta) -> float:
    return k1(x, x2, theta) + k2(x, x2, theta) + k3(x, x2, theta)


# -- matrix kernels -----------------------------------------------------------

def _pairwise(t1, E1, t2, E2):
    t1, t2 = np.asarray(t1, dtype=float), np.asarray(t2, dtype=float)
    E1, E2 = np.atleast_2d(np.asarray(E1, dtype=float)), np.atleast_2d(np.asarray(E2, dtype=float))
    if E1.shape[1] != E2.shape[1]:
        raise ValueError("embedding dimensions differ")
    dt = t1[:, None] - t2[None, :]
    de2 = cdist(E1, E2, "sqeuclidean")
    return dt, de2


def _terms(dt, de2, th):
    dt2 = dt * dt
    per = _sin2_pi(dt)
    k1m = th[0] ** 2 * np.exp(-dt2 / (2 * th[1] ** 2) - de2 / (2 * th[2] ** 2) - 2 * per / th[3] ** 2)
    u = 1 + dt2 / (2 * th[5] * th[6])
    k2m = th[4] ** 2 * u ** (-th[5]) * np.exp(-de2 / (2 * th[7] ** 2))
    k3m = th[8] ** 2 * np.exp(-de2 / (2 * th[9] ** 2) - dt2 / (2 * th[10] ** 2))
    return k1m, k2m, k3m, dt2, per, u


def cross_cov(t1, E1, t2, E2, hp: Hyperparameters) -> np.ndarray:
    dt, de2 = _pairwise(t1, E1, t2, E2)
    k1m, k2m, k3m, *_ = _terms(dt, de2, hp.theta)
    return k1m + k2m + k3m


def gram(t, E, hp: Hyperparameters) -> np.ndarray:
    """Covariance matrix of a single input set (no jitter)."""
    return cross_cov(t, E, t, E, hp)


def gram_with_grad(t, E, hp: Hyperparameters):
    """Gram matrix and its derivatives with respect to each log(theta_j)."""
    th = hp.theta
    dt, de2 = _pairwise(t, E, t, E)
    k1m, k2m, k3m, dt2, per, u = _terms(dt, de2, th)
    grads = [
        2 * k1m,
        k1m * dt2 / th[1] ** 2,
        k1m * de2 / th[2] ** 2,
        k1m * 4 * per / th[3] ** 2,
        2 * k2m,
        k2m * th[5] * (-np.log(u) + dt2 / (2 * th[5] * th[6] * u)),
        k2m * dt2 / (2 * th[6] * u),
        k2m * de2 / th[7] ** 2,
        2 * k3m,
        k3m * de2 / th[9] ** 2,
        k3m * dt2 / th[10] ** 2,
    ]
    return k1m + k2m + k3m, grads


# -- models ---------------------------------------------------------------------

@dataclass(frozen=True)
class GpModel:
    """Exact GP posterior over a fixed training set.

    Immutable: ``extend`` and ``fit`` return new instances.
    """

    hp: Hyperparameters
    t: np.ndarray
    E: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float
    dim: int = field(default=0)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def K(self) -> np.ndarray:
        return gram(self.t, self.E, self.hp)

    @property
    def inputs(self) -> list[GpInput]:
        return [GpInput(float(ti), tuple(ei)) for ti, ei in zip(self.t, self.E)]


def _as_inputs(t, E, dim=None):
    t = np.asarray(t, dtype=float).reshape(-1)
    E = np.asarray(E, dtype=float)
    if E.size == 0:
        E = E.reshape(len(t), dim if dim is not None else (E.shape[-1] if E.ndim == 2 else 0))
    E = E.reshape(len(t), -1) if E.ndim != 2 else E
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(E))):
        raise ValueError("GP inputs must be finite")
    return t, E


def _cholesky(K: np.ndarray, jitter: float) -> tuple[np.ndarray, float]:
    n = len(K)
    for _ in range(MAX_JITTER_RETRIES + 1):
        try:
            L = linalg.cholesky(K + jitter * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                return L, jitter
        except linalg.LinAlgError:
            pass
        logger.debug("cholesky failed at jitter %g, retrying", jitter)
        jitter *= 10
    raise NumericalError(f"covariance matrix not positive definite even with jitter {jitter / 10:g}")


def fit(t, E, y, hp: Hyperparameters, dim: int | None = None) -> GpModel:
    t, E = _as_inputs(t, E, dim)
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(y) != len(t):
        raise ValueError("inputs and targets differ in length")
    if len(y) == 0:
        return GpModel(hp, t, E, y, np.zeros((0, 0)), np.zeros(0), hp.jitter, E.shape[1])
    L, jitter = _cholesky(gram(t, E, hp), hp.jitter)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    return GpModel(hp, t, E, y, L, alpha, jitter, E.shape[1])


def predict(model: GpModel, t_star, E_star) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and variance at a batch of inputs."""
    t_star, E_star = _as_inputs(t_star, E_star, model.dim)
    prior = np.full(len(t_star), model.hp.prior_variance)
    if model.n == 0:
        return np.zeros(len(t_star)), prior
    Ks = cross_cov(model.t, model.E, t_star, E_star, model.hp)
    mean = Ks.T @ model.alpha
    v = linalg.solve_triangular(model.chol, Ks, lower=True, check_finite=False)
    var = prior - np.einsum("ij,ij->j", v, v)
    if np.any(var < -NEG_VAR_TOL):
        raise NumericalError(f"negative predictive variance {var.min():g}")
    return mean, np.maximum(var, 0.0)


def extend(model: GpModel, t_new, E_new, y_new) -> GpModel:
    """Add training points with a block Cholesky update.

    Cost is O(n^2 b) for b new points; the result matches a from-scratch fit
    on the concatenated data up to roundoff.
    """
    t_new, E_new = _as_inputs(t_new, E_new, model.dim)
    y_new = np.asarray(y_new, dtype=float).reshape(-1)
    if len(y_new) != len(t_new):
        raise ValueError("inputs and targets differ in length")
    if len(y_new) == 0:
        return model
    if model.n == 0:
        return fit(t_new, E_new, y_new, model.hp)
    t = np.concatenate([model.t, t_new])
    E = np.vstack([model.E, E_new])
    y = np.concatenate([model.y, y_new])
    K12 = cross_cov(model.t, model.E, t_new, E_new, model.hp)
    K22 = gram(t_new, E_new, model.hp)
    B = linalg.solve_triangular(model.chol, K12, lower=True, check_finite=False)
    S = K22 + model.jitter * np.eye(len(y_new)) - B.T @ B
    try:
        C = linalg.cholesky(S, lower=True, check_finite=False)
    except linalg.LinAlgError:
        logger.debug("schur complement not PD; refitting %d points", len(y))
        return fit(t, E, y, replace(model.hp, jitter=model.jitter))
    n, b = model.n, len(y_new)
    L = np.zeros((n + b, n + b))
    L[:n, :n] = model.chol
    L[n:, :n] = B.T
    L[n:, n:] = C
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    return GpModel(model.hp, t, E, y, L, alpha, model.jitter, model.dim)


def subset(model: GpModel, keep) -> GpModel:
    """Refit on a subset of the training points (boolean mask or indices)."""
    keep = np.asarray(keep)
    return fit(model.t[keep], model.E[keep], model.y[keep], replace(model.hp, jitter=model.jitter), model.dim)


# -- marginal likelihood -----------------------------------------------------------

def log_marginal_likelihood(t, E, y, hp: Hyperparameters) -> float:
    m = fit(t, E, y, hp)
    return _lml_from_model(m)


def _lml_from_model(m: GpModel) -> float:
    return float(-0.5 * m.y @ m.alpha - np.log(np.diag(m.chol)).sum() - 0.5 * m.n * np.log(2 * np.pi))


def lml_and_grad(t, E, y, hp: Hyperparameters) -> tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient with respect to log(theta)."""
    t, E = _as_inputs(t, E)
    y = np.asarray(y, dtype=float)
    K, dKs = gram_with_grad(t, E, hp)
    L, _ = _cholesky(K, hp.jitter)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    lml = float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * len(y) * np.log(2 * np.pi))
    Kinv = linalg.cho_solve((L, True), np.eye(len(y)), check_finite=False)
    W = np.outer(alpha, alpha) - Kinv
    grad = np.array([0.5 * np.sum(W * dK) for dK in dKs])
    return lml, grad


def grouped_lml_and_grad(t, E, y, hp: Hyperparameters, groups=None) -> tuple[float, np.ndarray]:
    """Sum of log marginal likelihoods of independent GPs sharing ``hp``,
    one per distinct label in ``groups`` (all points together if None)."""
    t, E = _as_inputs(t, E)
    y = np.asarray(y, dtype=float)
    if groups is None:
        return lml_and_grad(t, E, y, hp)
    groups = np.asarray(groups)
    total, grad = 0.0, np.zeros(N_THETA)
    for g in np.unique(groups):
        m = groups == g
        v, dv = lml_and_grad(t[m], E[m], y[m], hp)
        total += v
        grad += dv
    return total, grad


def optimize_hyperparameters(t, E, y, hp0: Hyperparameters = Hyperparameters(), max_iter: int = 100, gtol: float = 1e-4, method: str = "lbfgs", groups=None) -> Hyperparameters:
    """Maximize the log marginal likelihood over log(theta).

    ``method="lbfgs"`` uses bounded L-BFGS-B; ``method="ascent"`` is plain
    gradient ascent with step 0.05 and backtracking. Either way the result
    is never worse than ``hp0``. With ``groups`` the objective is the summed
    likelihood of one independent GP per group.
    """
    t, E = _as_inputs(t, E)
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise ValueError("need at least two points to fit hyperparameters")
    try:
        lml0, g0 = grouped_lml_and_grad(t, E, y, hp0, groups)
    except NumericalError as exc:
        raise NumericalError(f"likelihood not finite at the initial hyperparameters; try another initialization ({exc})") from exc
    if not np.isfinite(lml0) or not np.all(np.isfinite(g0)):
        raise NumericalError("likelihood not finite at the initial hyperparameters; try another initialization")

    def value_grad(x):
        try:
            v, g = grouped_lml_and_grad(t, E, y, Hyperparameters.from_log(x, hp0.jitter), groups)
        except (NumericalError, ValueError):
            return -np.inf, np.zeros(N_THETA)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return -np.inf, np.zeros(N_THETA)
        return v, g

    x0 = hp0.log_theta
    if method == "lbfgs":
        def neg(x):
            v, g = value_grad(x)
            return (1e300, np.zeros(N_THETA)) if not np.isfinite(v) else (-v, -g)

        res = optimize.minimize(
            neg, x0, jac=True, method="L-BFGS-B",
            bounds=[LOG_THETA_BOUNDS] * N_THETA,
            options={"maxiter": max_iter, "gtol": gtol},
        )
        x_best, v_best = res.x, -res.fun
    elif method == "ascent":
        x_best, v_best, g = x0, lml0, g0
        for _ in range(max_iter):
            gn = np.linalg.norm(g)
            if gn < gtol:
                break
            step = 0.05
            for _ in range(20):
                x_try = np.clip(x_best + step * g / gn, *LOG_THETA_BOUNDS)
                v_try, g_try = value_grad(x_try)
                if v_try > v_best:
                    break
                step /= 2
            else:
                break
            x_best, v_best, g = x_try, v_try, g_try
    else:
        raise ValueError(f"unknown method {method!r}")

    if not np.isfinite(v_best) or v_best < lml0:
        return hp0
    return Hyperparameters.from_log(x_best, hp0.jitter)
