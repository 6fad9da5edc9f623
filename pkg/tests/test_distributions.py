import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from cpcure.distributions import (
    Ptmvn,
    TruncatedNormal1D,
    log_ndtr_diff,
    lognormal_aft_logdensity,
    lognormal_aft_logsurvival,
    mvn_condition,
    mvn_logpdf,
    truncnorm_ppf,
)
from cpcure.exceptions import DomainError, FactorizationError
from oracles import truncated_omega_moments


def random_spd(rng, d):
    A = rng.standard_normal((d, d))
    return A @ A.T + d * np.eye(d)


def test_mvn_logpdf_matches_scipy():
    rng = np.random.default_rng(0)
    for d in (1, 3, 4):
        S = random_spd(rng, d)
        m = rng.standard_normal(d)
        x = rng.standard_normal((5, d))
        assert np.allclose(mvn_logpdf(x, m, S), stats.multivariate_normal(m, S).logpdf(x), atol=1e-12)


def test_mvn_logpdf_rejects_bad_cov():
    with pytest.raises(FactorizationError):
        mvn_logpdf(np.zeros(2), np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        mvn_logpdf(np.zeros(3), np.zeros(2), np.eye(2))


def test_condition_matches_joint_regression():
    rng = np.random.default_rng(1)
    S = random_spd(rng, 4)
    m = rng.standard_normal(4)
    mb, Cb = mvn_condition(m, S, 0.7)
    # oracle: conditional density ratio p(w, b) / p(w) is Gaussian in b with these moments
    b = rng.standard_normal(3)
    lhs = stats.multivariate_normal(m, S).logpdf(np.r_[0.7, b]) - stats.norm(m[0], np.sqrt(S[0, 0])).logpdf(0.7)
    assert lhs == pytest.approx(stats.multivariate_normal(mb, Cb).logpdf(b), abs=1e-10)
    with pytest.raises(DomainError):
        mvn_condition(m, np.zeros((4, 4)), 0.0)


def test_log_ndtr_diff_tails():
    assert log_ndtr_diff(-1.0, 1.0) == pytest.approx(np.log(stats.norm.cdf(1) - stats.norm.cdf(-1)))
    # far right tail: Phi(41) - Phi(40) underflows naively but is representable in logs
    assert log_ndtr_diff(40.0, 41.0) == pytest.approx(stats.norm.logsf(40.0), rel=1e-6)
    assert log_ndtr_diff(-41.0, -40.0) == pytest.approx(stats.norm.logcdf(-40.0), rel=1e-6)
    assert log_ndtr_diff(1.0, 1.0) == -np.inf


@pytest.mark.parametrize("mu,sigma,a,b", [(0.0, 1.0, -1.0, 2.0), (0.5, 0.2, 0.0, 0.3), (0.0, 1.0, 3.0, np.inf),
                                          (2.0, 0.5, -np.inf, 0.1)])
def test_truncnorm_ppf_matches_scipy(mu, sigma, a, b):
    u = np.linspace(0.01, 0.99, 25)
    ref = stats.truncnorm.ppf(u, (a - mu) / sigma, (b - mu) / sigma, loc=mu, scale=sigma)
    assert np.allclose(truncnorm_ppf(u, mu, sigma, a, b), ref, rtol=1e-9, atol=1e-12)


def test_truncnorm_ppf_far_tail_stays_in_interval():
    x = truncnorm_ppf(np.array([1e-12, 0.5, 1 - 1e-12]), 0.0, 1.0, 30.0, 31.0)
    assert np.all((x > 30.0) & (x < 31.0))
    assert np.all(np.diff(x) > 0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-5, 5), st.floats(0.05, 3), st.floats(-6, 6), st.floats(0.01, 5),
       st.floats(1e-9, 1 - 1e-9))
def test_truncnorm_ppf_in_bounds_and_monotone(mu, sigma, a, width, u):
    x = truncnorm_ppf(u, mu, sigma, a, a + width)
    assert a < x < a + width
    v = min(u * 1.5, 1 - 1e-12)
    assert truncnorm_ppf(v, mu, sigma, a, a + width) >= x


def test_truncated_normal_validation():
    with pytest.raises(DomainError):
        TruncatedNormal1D(0.0, -1.0)
    with pytest.raises(DomainError):
        TruncatedNormal1D(0.0, 1.0, 2.0, 1.0)
    # far-tail intervals are still representable on the log scale
    x = TruncatedNormal1D(0.0, 1.0, 60.0, 61.0).sample(np.random.default_rng(0), 50)
    assert np.all((x > 60.0) & (x < 61.0))


def test_ptmvn_sampler_bounds_and_moments(truth):
    rng = np.random.default_rng(3)
    upper = 0.45
    d = Ptmvn(truth.re_mean, truth.re_cov, 0.0, upper)
    x = d.sample(rng, 100_000)
    assert np.all((x[:, 0] > 0) & (x[:, 0] <= upper))
    m1, var = truncated_omega_moments(truth.re_mean[0], np.sqrt(truth.re_cov[0, 0]), upper)
    tol = 4 / np.sqrt(x.shape[0])
    assert abs(x[:, 0].mean() - m1) < tol
    assert abs(x[:, 0].var() - var) < tol
    # b | omega is exactly the Gaussian conditional: regress b on omega
    coef = np.polyfit(x[:, 0], x[:, 2], 1)[0]
    S = truth.re_cov
    assert coef == pytest.approx(S[2, 0] / S[0, 0], abs=0.02)


def test_ptmvn_rejects_empty_truncation(truth):
    with pytest.raises(DomainError):
        Ptmvn(truth.re_mean, truth.re_cov, 0.0, 0.0)
    with pytest.raises(FactorizationError):
        Ptmvn(truth.re_mean, -np.eye(4))
    far = Ptmvn(np.r_[-100.0, 0, 0, 0], np.eye(4) * 0.01, 0.0, 1.0)
    x = far.sample(np.random.default_rng(0), 20)
    assert np.all((x[:, 0] > 0) & (x[:, 0] <= 1.0))


def test_aft_density_and_survival_match_scipy():
    w = np.array([[1.0, 0.3], [1.0, -1.2]])
    g = np.array([0.2, 0.5])
    t = np.array([0.7, 2.5])
    loc = w @ g
    ref = stats.lognorm(s=0.6, scale=np.exp(loc))
    assert np.allclose(lognormal_aft_logdensity(t, w, g, 0.6), ref.logpdf(t))
    assert np.allclose(lognormal_aft_logsurvival(t, w, g, 0.6), ref.logsf(t))
    with pytest.raises(DomainError):
        lognormal_aft_logdensity(np.array([0.0]), w[:1], g, 0.6)
    with pytest.raises(DomainError):
        lognormal_aft_logsurvival(t, w, g, 0.0)
