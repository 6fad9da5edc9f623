import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import optimize, stats

from cpcure.estep import run_estep
from cpcure.mstep import (
    ReSufficient,
    _log_trunc_terms,
    chol_to_pvech,
    cov_to_pvech,
    pvech_to_chol,
    pvech_to_cov,
    q_aft,
    q_long,
    q_r_objective,
    q_stable,
    update_aft,
    update_long_cp,
    update_re_params,
    update_stable_params,
    update_stable_rate,
    vech,
)


@pytest.fixture(scope="module")
def stats_and_data(medium_sim):
    from cpcure.mcem import initialize_params

    ds = medium_sim.dataset
    init = initialize_params(ds)
    return run_estep(ds, init, K=200, seed=3), ds, init


def test_vech_order_is_column_major_lower():
    M = np.arange(16.0).reshape(4, 4)
    assert np.array_equal(vech(M), [0, 4, 8, 12, 5, 9, 13, 10, 14, 15])


@settings(max_examples=50, deadline=None)
@given(arrays(float, (10,), elements=st.floats(-2, 2)))
def test_log_cholesky_roundtrip(p):
    cov = pvech_to_cov(p)
    assert np.all(np.linalg.eigvalsh(cov) > 0)
    assert np.allclose(cov_to_pvech(cov), p, atol=1e-8)
    assert np.allclose(chol_to_pvech(pvech_to_chol(p)), p)


def test_q_r_gradient_matches_finite_differences(stats_and_data):
    st, _, init = stats_and_data
    suff = ReSufficient.from_stats(st)
    rng = np.random.default_rng(0)
    base = np.r_[init.re_mean, cov_to_pvech(init.re_cov)]
    for _ in range(5):
        x = base + rng.normal(0, 0.2, size=14)
        _, g = q_r_objective(x[:4], x[4:], suff)
        h = 1e-6
        fd = np.array([(q_r_objective((x + h * e)[:4], (x + h * e)[4:], suff)[0]
                        - q_r_objective((x - h * e)[:4], (x - h * e)[4:], suff)[0]) / (2 * h) for e in np.eye(14)])
        assert np.allclose(g, fd, rtol=1e-5, atol=1e-5 * np.abs(g).max())


@pytest.mark.parametrize("mu_w", [0.5, -0.3, 2.0])
def test_truncation_terms(mu_w):
    sd = 0.4
    upper = np.array([0.05, 0.6, 1.5, 50.0])
    logz, d_mu, d_sd = _log_trunc_terms(mu_w, sd, upper)
    ref = np.log(stats.norm.cdf((upper - mu_w) / sd) - stats.norm.cdf(-mu_w / sd))
    assert np.allclose(logz, ref, rtol=1e-10)
    h = 1e-6
    fd_mu = (_log_trunc_terms(mu_w + h, sd, upper)[0] - _log_trunc_terms(mu_w - h, sd, upper)[0]) / (2 * h)
    fd_sd = (_log_trunc_terms(mu_w, sd + h, upper)[0] - _log_trunc_terms(mu_w, sd - h, upper)[0]) / (2 * h)
    assert np.allclose(d_mu, fd_mu, rtol=1e-5, atol=1e-8)
    assert np.allclose(d_sd, fd_sd, rtol=1e-5, atol=1e-8)


def test_re_update_is_stationary_and_ascends(stats_and_data):
    st, _, init = stats_and_data
    suff = ReSufficient.from_stats(st)
    mean, cov = update_re_params(suff, init.re_mean, init.re_cov)
    before = q_r_objective(init.re_mean, cov_to_pvech(init.re_cov), suff)[0]
    after, g = q_r_objective(mean, cov_to_pvech(cov), suff)
    assert after >= before
    assert np.abs(g).max() / suff.total < 1e-4


def test_aft_update_maximizes_q(stats_and_data):
    st, ds, _ = stats_and_data
    gamma, sd = update_aft(st, ds)
    res = optimize.minimize(lambda v: -q_aft(v[:-1], np.exp(v[-1]), st, ds),
                            np.r_[np.zeros(gamma.size), 0.0], method="BFGS")
    assert np.allclose(gamma, res.x[:-1], atol=1e-4)
    assert sd == pytest.approx(np.exp(res.x[-1]), rel=1e-4)


def test_long_update_maximizes_q(stats_and_data):
    st, ds, _ = stats_and_data
    beta, sd = update_long_cp(st, ds)
    res = optimize.minimize(lambda v: -q_long(v[:-1], np.exp(v[-1]), st, ds),
                            np.r_[np.zeros(beta.size), np.log(0.1)], method="BFGS")
    assert np.allclose(beta, res.x[:-1], atol=1e-4)
    assert sd == pytest.approx(np.exp(res.x[-1]), rel=1e-4)


def test_stable_update_maximizes_q(stats_and_data):
    st, ds, init = stats_and_data
    mu, Sigma, beta, sd = update_stable_params(st, ds, init)
    best = q_stable(mu, Sigma, beta, sd, st, ds)
    rng = np.random.default_rng(1)
    L = np.linalg.cholesky(Sigma)
    for _ in range(20):
        dL = np.tril(rng.normal(0, 0.02, (2, 2))) * np.abs(L).max()
        L2 = L + dL
        other = q_stable(mu + rng.normal(0, 0.01, 2), L2 @ L2.T, beta + rng.normal(0, 0.01, beta.size),
                         sd * np.exp(rng.normal(0, 0.05)), st, ds)
        assert other <= best + 1e-9


def test_stable_rate_is_mean_responsibility(stats_and_data):
    st, _, _ = stats_and_data
    assert update_stable_rate(st) == pytest.approx(st.responsibility.mean())
