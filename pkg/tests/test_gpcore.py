import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from htte import gpcore
from htte.gpcore import GpInput, Hyperparameters, NumericalError

HP = Hyperparameters()


# -- independent oracles


def kernel_oracle(t, e, t2, e2, th):
    """Straight transcription of the three covariance terms with math.*."""
    dt = t - t2
    de2 = sum((a - b) ** 2 for a, b in zip(e, e2))
    k1 = th[0] ** 2 * math.exp(-dt**2 / (2 * th[1] ** 2) - de2 / (2 * th[2] ** 2) - 2 * math.sin(math.pi * dt) ** 2 / th[3] ** 2)
    k2 = th[4] ** 2 * (1 + dt**2 / (2 * th[5] * th[6])) ** (-th[5]) * math.exp(-de2 / (2 * th[7] ** 2))
    k3 = th[8] ** 2 * math.exp(-de2 / (2 * th[9] ** 2) - dt**2 / (2 * th[10] ** 2))
    return k1, k2, k3


def dense_oracle(t, E, y, ts, Es, hp):
    """Posterior by explicit matrix inverse, kernel from the scalar oracle."""
    def K(ta, Ea, tb, Eb):
        return np.array([[sum(kernel_oracle(a, ea, b, eb, hp.theta)) for b, eb in zip(tb, Eb)] for a, ea in zip(ta, Ea)])

    Kinv = np.linalg.inv(K(t, E, t, E) + hp.jitter * np.eye(len(t)))
    Ks = K(t, E, ts, Es)
    mean = Ks.T @ Kinv @ y
    var = np.diag(K(ts, Es, ts, Es)) - np.einsum("ij,ik,kj->j", Ks, Kinv, Ks)
    return mean, var


def random_instance(rng, n, d=10, m=10):
    t = rng.uniform(0, 5, n)
    E = rng.normal(0, 0.5, (n, d))
    y = rng.normal(0, 1, n)
    return t, E, y, rng.uniform(0, 5, m), rng.normal(0, 0.5, (m, d))


def random_hp(rng):
    return Hyperparameters(tuple(np.exp(rng.uniform(np.log(0.3), np.log(3.0), 11))))


# -- kernels


def test_kernel_identity_values():
    x = GpInput(1.3, (0.2, -0.1))
    th = HP.theta
    assert gpcore.k1(x, x, HP) == th[0] ** 2
    assert gpcore.k2(x, x, HP) == th[4] ** 2
    assert gpcore.k3(x, x, HP) == th[8] ** 2
    assert gpcore.k(x, x, HP) == pytest.approx(HP.prior_variance, rel=1e-15)


def test_k1_one_day_offset():
    th = list(HP.theta)
    th[1] = 10.0
    x, x2 = GpInput(2.0, (0.5,)), GpInput(3.0, (0.5,))
    assert gpcore.k1(x, x2, th) == th[0] ** 2 * math.exp(-1 / 200)


@given(st.integers(-30, 30), st.integers(0, 100), st.floats(0.01, 100))
def test_k1_periodic_factor_is_one_at_integer_days(days, t0, theta2):
    th = list(HP.theta)
    th[1] = theta2
    e = (0.1, 0.2)
    assert float(gpcore._sin2_pi(np.float64(days))) == 0.0
    got = gpcore.k1(GpInput(float(t0), e), GpInput(float(t0 + days), e), th)
    assert got == pytest.approx(th[0] ** 2 * math.exp(-(days**2) / (2 * theta2**2)), rel=1e-14)


def test_scalar_kernels_match_oracle(rng):
    for _ in range(200):
        th = random_hp(rng).theta
        d = int(rng.integers(1, 11))
        x = GpInput(rng.uniform(0, 10), tuple(rng.normal(size=d)))
        x2 = GpInput(rng.uniform(0, 10), tuple(rng.normal(size=d)))
        o1, o2, o3 = kernel_oracle(x.t, x.e, x2.t, x2.e, th)
        assert gpcore.k1(x, x2, th) == pytest.approx(o1, rel=1e-12, abs=1e-300)
        assert gpcore.k2(x, x2, th) == pytest.approx(o2, rel=1e-12, abs=1e-300)
        assert gpcore.k3(x, x2, th) == pytest.approx(o3, rel=1e-12, abs=1e-300)
        assert gpcore.k(x, x2, th) == gpcore.k(x2, x, th)


def test_k2_large_shape_limit():
    th = list(HP.theta)
    th[5] = 1e6
    th[6] = 0.05
    x, x2 = GpInput(0.0, (0.3, 0.0)), GpInput(0.04, (0.0, 0.4))
    de2 = 0.3**2 + 0.4**2
    se = th[4] ** 2 * math.exp(-(0.04**2) / (2 * th[6])) * math.exp(-de2 / (2 * th[7] ** 2))
    assert gpcore.k2(x, x2, th) == pytest.approx(se, rel=1e-6)


def test_k3_decays_with_embedding_distance():
    x, x2 = GpInput(0.0, (0.0,)), GpInput(0.0, (1e3,))
    assert gpcore.k3(x, x2, HP) == 0.0


def test_kernel_dimension_mismatch():
    with pytest.raises(ValueError):
        gpcore.k(GpInput(0, (1.0,)), GpInput(0, (1.0, 2.0)), HP)


def test_gram_matches_scalar_kernel(rng):
    t, E, *_ = random_instance(rng, 12, d=3)
    G = gpcore.gram(t, E, HP)
    for i in range(12):
        for j in range(12):
            assert G[i, j] == pytest.approx(sum(kernel_oracle(t[i], E[i], t[j], E[j], HP.theta)), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31))
def test_gram_symmetric_psd(n, seed):
    rng = np.random.default_rng(seed)
    t, E, *_ = random_instance(rng, n, d=int(rng.integers(1, 11)))
    G = gpcore.gram(t, E, random_hp(rng))
    assert np.array_equal(G, G.T)
    assert np.linalg.eigvalsh(G).min() >= -1e-8


def test_gram_with_grad_matches_finite_differences(rng):
    t, E, *_ = random_instance(rng, 8, d=2)
    hp = random_hp(rng)
    _, grads = gpcore.gram_with_grad(t, E, hp)
    h = 1e-6
    for j in range(11):
        lp, lm = hp.log_theta.copy(), hp.log_theta.copy()
        lp[j] += h
        lm[j] -= h
        fd = (gpcore.gram(t, E, Hyperparameters.from_log(lp)) - gpcore.gram(t, E, Hyperparameters.from_log(lm))) / (2 * h)
        np.testing.assert_allclose(grads[j], fd, rtol=1e-5, atol=1e-8)


# -- fit / predict


def test_empty_model_returns_prior():
    m = gpcore.fit([], np.zeros((0, 3)), [], HP)
    assert m.n == 0
    mean, var = gpcore.predict(m, [0.5, 1.5], np.ones((2, 3)))
    np.testing.assert_array_equal(mean, 0.0)
    np.testing.assert_allclose(var, HP.prior_variance)


def test_single_point_closed_form():
    m = gpcore.fit([1.0], [[0.3, 0.1]], [2.0], HP)
    kxx = HP.prior_variance
    mean, _ = gpcore.predict(m, [1.0], [[0.3, 0.1]])
    assert mean[0] == pytest.approx(2.0 * kxx / (kxx + HP.jitter), rel=1e-12)
    assert mean[0] == pytest.approx(2.0, rel=1e-5)


def test_two_point_closed_form(rng):
    t, E, y, ts, Es = random_instance(rng, 2, d=4, m=5)
    th = HP.theta
    kk = lambda a, ea, b, eb: sum(kernel_oracle(a, ea, b, eb, th))  # noqa: E731
    a = kk(t[0], E[0], t[0], E[0]) + HP.jitter
    d = kk(t[1], E[1], t[1], E[1]) + HP.jitter
    b = kk(t[0], E[0], t[1], E[1])
    det = a * d - b * b
    inv = np.array([[d, -b], [-b, a]]) / det
    mean, var = gpcore.predict(gpcore.fit(t, E, y, HP), ts, Es)
    for j in range(5):
        ks = np.array([kk(t[0], E[0], ts[j], Es[j]), kk(t[1], E[1], ts[j], Es[j])])
        assert mean[j] == pytest.approx(ks @ inv @ y, abs=1e-10)
        assert var[j] == pytest.approx(HP.prior_variance - ks @ inv @ ks, abs=1e-10)


def test_predict_matches_dense_oracle_n25(rng):
    t, E, y, ts, Es = random_instance(rng, 25)
    mean, var = gpcore.predict(gpcore.fit(t, E, y, HP), ts, Es)
    om, ov = dense_oracle(t, E, y, ts, Es, HP)
    np.testing.assert_allclose(mean, om, atol=1e-8)
    np.testing.assert_allclose(var, ov, atol=1e-8)


def test_prior_reversion_far_away(rng):
    t, E, y, *_ = random_instance(rng, 20, d=2)
    m = gpcore.fit(t, E, y, HP)
    far_t = t.max() + 50 * HP.theta[1]
    mean, var = gpcore.predict(m, [far_t], [[50.0 * 10, 0.0]])
    assert abs(mean[0]) < 0.01
    assert var[0] == pytest.approx(HP.prior_variance, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31))
def test_variance_bounds(n, seed):
    rng = np.random.default_rng(seed)
    t, E, y, ts, Es = random_instance(rng, n, d=3)
    hp = random_hp(rng)
    _, var = gpcore.predict(gpcore.fit(t, E, y, hp), np.concatenate([ts, t[:3]]), np.vstack([Es, E[:3]]))
    assert np.all(var >= 0)
    assert np.all(var <= hp.prior_variance + hp.jitter)


def test_model_factor_reproduces_matrix(rng):
    t, E, y, *_ = random_instance(rng, 30)
    m = gpcore.fit(t, E, y, HP)
    np.testing.assert_allclose(m.chol @ m.chol.T, m.K + m.jitter * np.eye(30), atol=1e-8)
    np.testing.assert_array_equal(m.K, m.K.T)
    assert len(m.inputs) == m.n == 30


def test_jitter_retry_escalates():
    # eigenvalues 2 and -1e-9: fails until the jitter exceeds 1e-9
    K = np.array([[1.0, 1.0 + 1e-9], [1.0 + 1e-9, 1.0]])
    L, jitter = gpcore._cholesky(K, 1e-11)
    assert jitter == pytest.approx(1e-8)
    np.testing.assert_allclose(L @ L.T, K + jitter * np.eye(2), atol=1e-12)


def test_cholesky_gives_up():
    K = -np.eye(3)
    with pytest.raises(NumericalError):
        gpcore._cholesky(K, 1e-6)


def test_input_validation():
    with pytest.raises(ValueError):
        gpcore.fit([0.0, np.nan], np.zeros((2, 1)), [0, 1], HP)
    with pytest.raises(ValueError):
        gpcore.fit([0.0, 1.0], np.zeros((2, 1)), [0.0], HP)
    with pytest.raises(ValueError):
        Hyperparameters(theta=(1.0,) * 10)
    with pytest.raises(ValueError):
        Hyperparameters(theta=(1.0,) * 10 + (-1.0,))


# -- extend


def test_extend_empty_equals_fit(rng):
    t, E, y, ts, Es = random_instance(rng, 10)
    m0 = gpcore.fit([], np.zeros((0, 10)), [], HP)
    a = gpcore.predict(gpcore.extend(m0, t, E, y), ts, Es)
    b = gpcore.predict(gpcore.fit(t, E, y, HP), ts, Es)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_extend_with_nothing_is_noop(rng):
    t, E, y, ts, Es = random_instance(rng, 10)
    m = gpcore.fit(t, E, y, HP)
    m2 = gpcore.extend(m, [], np.zeros((0, 10)), [])
    np.testing.assert_array_equal(gpcore.predict(m2, ts, Es), gpcore.predict(m, ts, Es))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(1, 10), st.integers(0, 2**31))
def test_extend_equals_refit(n, b, seed):
    rng = np.random.default_rng(seed)
    t, E, y, ts, Es = random_instance(rng, n + b)
    hp = random_hp(rng)
    m = gpcore.extend(gpcore.fit(t[:n], E[:n], y[:n], hp), t[n:], E[n:], y[n:])
    ref = gpcore.fit(t, E, y, hp)
    np.testing.assert_allclose(gpcore.predict(m, ts, Es), gpcore.predict(ref, ts, Es), atol=1e-8)


def test_subset_refits(rng):
    t, E, y, ts, Es = random_instance(rng, 15)
    m = gpcore.fit(t, E, y, HP)
    keep = np.arange(0, 15, 2)
    np.testing.assert_allclose(
        gpcore.predict(gpcore.subset(m, keep), ts, Es), gpcore.predict(gpcore.fit(t[keep], E[keep], y[keep], HP), ts, Es), atol=1e-12
    )


# -- likelihood


def test_lml_matches_dense_formula(rng):
    t, E, y, *_ = random_instance(rng, 15, d=3)
    K = gpcore.gram(t, E, HP) + HP.jitter * np.eye(15)
    sign, logdet = np.linalg.slogdet(K)
    ref = -0.5 * y @ np.linalg.solve(K, y) - 0.5 * logdet - 7.5 * math.log(2 * math.pi)
    assert gpcore.log_marginal_likelihood(t, E, y, HP) == pytest.approx(ref, rel=1e-9)
    lml, _ = gpcore.lml_and_grad(t, E, y, HP)
    assert lml == pytest.approx(ref, rel=1e-9)


def test_grouped_lml_is_sum_of_blocks(rng):
    t, E, y, *_ = random_instance(rng, 20, d=3)
    groups = np.repeat([0, 1, 2], [5, 8, 7])
    v, g = gpcore.grouped_lml_and_grad(t, E, y, HP, groups)
    parts = [gpcore.lml_and_grad(t[groups == k], E[groups == k], y[groups == k], HP) for k in range(3)]
    assert v == pytest.approx(sum(p[0] for p in parts), rel=1e-12)
    np.testing.assert_allclose(g, sum(p[1] for p in parts), rtol=1e-12)


def test_lml_gradient_finite_differences(rng):
    t, E, y, *_ = random_instance(rng, 10)
    hp = random_hp(rng)
    _, g = gpcore.lml_and_grad(t, E, y, hp)
    h = 1e-5
    for j in range(11):
        lp, lm = hp.log_theta.copy(), hp.log_theta.copy()
        lp[j] += h
        lm[j] -= h
        fd = (gpcore.log_marginal_likelihood(t, E, y, Hyperparameters.from_log(lp)) - gpcore.log_marginal_likelihood(t, E, y, Hyperparameters.from_log(lm))) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-4, abs=1e-7)


@pytest.mark.parametrize("method", ["lbfgs", "ascent"])
def test_optimizer_never_worse(rng, method):
    t, E, y, *_ = random_instance(rng, 30, d=2)
    hp = gpcore.optimize_hyperparameters(t, E, y, HP, max_iter=30, method=method)
    assert gpcore.log_marginal_likelihood(t, E, y, hp) >= gpcore.log_marginal_likelihood(t, E, y, HP)


def test_optimizer_errors():
    with pytest.raises(ValueError):
        gpcore.optimize_hyperparameters([0.0], [[0.0]], [1.0])
    with pytest.raises(ValueError):
        gpcore.optimize_hyperparameters([0.0, 1.0], [[0.0], [1.0]], [1.0, 2.0], method="newton")


def test_optimizer_recovers_prior_sample_likelihood():
    """Data drawn from the prior with the periodic term active: the fitted
    hyperparameters explain it at least about as well as the true ones."""
    rng = np.random.default_rng(11)
    true = Hyperparameters((1.0, 20.0, 1.0, 0.5, 0.4, 2.0, 0.05, 1.0, 0.3, 1.0, 0.01))
    n = 120
    t = np.sort(rng.uniform(0, 6, n))
    E = rng.normal(0, 0.7, (n, 2))
    K = gpcore.gram(t, E, true) + 1e-6 * np.eye(n)
    y = np.linalg.cholesky(K) @ rng.normal(size=n)
    fitted = gpcore.optimize_hyperparameters(t, E, y, Hyperparameters())
    ref = gpcore.log_marginal_likelihood(t, E, y, true)
    got = gpcore.log_marginal_likelihood(t, E, y, fitted)
    assert got >= ref - 0.05 * abs(ref)


def test_hyperparameter_file_round_trip(tmp_path):
    hp = Hyperparameters(tuple(np.linspace(0.1, 2.0, 11)), 1e-5)
    hp.save(tmp_path / "hp.csv")
    assert Hyperparameters.load(tmp_path / "hp.csv") == hp
    lines = (tmp_path / "hp.csv").read_text().splitlines()
    assert lines[0] == "name,value" and lines[1].startswith("theta1,") and lines[-1].startswith("jitter,")
