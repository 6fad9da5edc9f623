"""M-step: closed-form block updates and the box-constrained L-BFGS update
of the truncated random-effect distribution (mean and Cholesky-log
parameterized covariance).

Each closed-form update is the weighted complete-data MLE of its block of
the Monte Carlo Q-function, with the E-step statistics held fixed.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import log_ndtr

from .distributions import LOG_2PI, cholesky, log_ndtr_diff
from .exceptions import FactorizationError

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-8
# column-major lower-triangle (vech) ordering of a 4 x 4 matrix
_COL, _ROW = np.triu_indices(4)
VECH_ROWS, VECH_COLS = _ROW, _COL
VECH_DIAG = np.flatnonzero(VECH_ROWS == VECH_COLS)


class MStepWarning(UserWarning):
    pass


def _warn(msg):
    logger.warning(msg)
    warnings.warn(msg, MStepWarning, stacklevel=3)


def _solve_normal(A, b, what):
    if A.size == 0:
        return np.zeros(0)
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        raise FactorizationError(f"{what}: weighted design is rank deficient") from None
    return np.linalg.solve(L.T, np.linalg.solve(L, b))


# ----------------------------------------------------------------------------
# Cholesky-log parameterization

def vech(M):
    return np.asarray(M)[VECH_ROWS, VECH_COLS]


def chol_to_pvech(O):
    P = np.array(O, dtype=float)
    P[np.diag_indices(4)] = np.log(np.diag(O))
    return vech(P)


def pvech_to_chol(p):
    O = np.zeros((4, 4))
    O[VECH_ROWS, VECH_COLS] = p
    O[np.diag_indices(4)] = np.exp(np.diag(O))
    return O


def cov_to_pvech(cov):
    return chol_to_pvech(cholesky(cov))


def pvech_to_cov(p):
    O = pvech_to_chol(p)
    return O @ O.T


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iter: int = 200
    grad_tol: float = 1e-8
    box_lower: np.ndarray = field(default_factory=lambda: default_box()[0])
    box_upper: np.ndarray = field(default_factory=lambda: default_box()[1])

    def __post_init__(self):
        if self.memory < 1:
            raise ValueError("memory must be >= 1")
        if not np.all(np.asarray(self.box_lower) < np.asarray(self.box_upper)):
            raise ValueError("box_lower must be below box_upper elementwise")


def default_box():
    lo = np.empty(14)
    hi = np.empty(14)
    lo[0], hi[0] = -10.0, 10.0
    lo[1:4], hi[1:4] = -50.0, 50.0
    off = np.full(10, -50.0), np.full(10, 50.0)
    off[0][VECH_DIAG], off[1][VECH_DIAG] = np.log(1e-4), np.log(1e2)
    lo[4:], hi[4:] = off
    return lo, hi


# ----------------------------------------------------------------------------
# closed-form blocks

def update_stable_rate(stats):
    return float(np.mean(stats.responsibility))


def _aft_moments(stats):
    return stats.expect(stats.t_star), stats.expect(stats.t_star ** 2)


def q_aft(gamma, sigma_tte, stats, dataset):
    d = stats.cp_weight
    m1, m2 = _aft_moments(stats)
    loc = dataset.packed.w @ np.asarray(gamma)
    sq = m2 - 2.0 * loc * m1 + loc * loc
    return float(np.sum(d * (-0.5 * (LOG_2PI + 2 * np.log(sigma_tte)) - 0.5 * sq / sigma_tte ** 2)))


def update_aft(stats, dataset):
    """Weighted normal regression of (expected) log event times on w."""
    d = stats.cp_weight
    W = dataset.packed.w
    m1, m2 = _aft_moments(stats)
    gamma = _solve_normal(W.T @ (d[:, None] * W), W.T @ (d * m1), "AFT update")
    loc = W @ gamma
    var = np.sum(d * (m2 - 2.0 * loc * m1 + loc * loc)) / np.sum(d)
    if var < VAR_FLOOR:
        _warn(f"AFT variance estimate {var:.3g} clipped at {VAR_FLOOR}")
        var = VAR_FLOOR
    return gamma, float(np.sqrt(var))


def _long_moments(stats, dataset, beta):
    p = dataset.packed
    xb = p.x @ beta
    ysum = np.sum(p.y, axis=1)
    yy = np.sum(p.y * p.y, axis=1)
    e_zb_sum = stats.expect(stats.zb_sum)
    e_y_zb = stats.expect(stats.y_zb)
    e_quad = stats.expect(stats.zb_quad)
    n = p.n_obs
    # E ||y - x'beta 1 - Z b||^2
    sq = yy - 2 * xb * ysum + n * xb * xb - 2 * (e_y_zb - xb * e_zb_sum) + e_quad
    return sq, e_zb_sum


def q_long(beta, sigma_y, stats, dataset):
    d = stats.cp_weight
    sq, _ = _long_moments(stats, dataset, np.asarray(beta))
    n = dataset.packed.n_obs
    return float(np.sum(d * (-0.5 * n * (LOG_2PI + 2 * np.log(sigma_y)) - 0.5 * sq / sigma_y ** 2)))


def update_long_cp(stats, dataset):
    """Fixed effects and residual SD of the piecewise model."""
    p = dataset.packed
    d = stats.cp_weight
    n = p.n_obs
    e_zb_sum = stats.expect(stats.zb_sum)
    A = p.x.T @ ((d * n)[:, None] * p.x)
    rhs = p.x.T @ (d * (p.y.sum(axis=1) - e_zb_sum))
    beta = _solve_normal(A, rhs, "longitudinal update")
    sq, _ = _long_moments(stats, dataset, beta)
    var = np.sum(d * sq) / np.sum(d * n)
    if var < VAR_FLOOR:
        _warn(f"residual variance estimate {var:.3g} clipped at {VAR_FLOOR}")
        var = VAR_FLOOR
    return beta, float(np.sqrt(var))


def _stable_weights(stats):
    return np.where(stats.event, 0.0, stats.responsibility)


def q_stable(mu_rs, Sigma_rs, beta_s, sigma_ys, stats, dataset):
    e = _stable_weights(stats)
    sel = e > 0
    p = dataset.packed
    m = stats.stable_post_mean[sel]
    C = stats.stable_post_cov[sel]
    dev = m - mu_rs
    S = C + np.einsum("ni,nj->nij", dev, dev)
    Sinv = np.linalg.inv(Sigma_rs)
    _, logdet = np.linalg.slogdet(Sigma_rs)
    q_r = -0.5 * (2 * LOG_2PI + logdet) - 0.5 * np.einsum("ij,nji->n", Sinv, S)
    xb = p.xs[sel] @ beta_s
    y = p.y[sel]
    n = p.n_obs[sel]
    sq = (np.sum(y * y, 1) - 2 * xb * y.sum(1) + n * xb * xb
          - 2 * (stats.stable_y_zb[sel] - xb * stats.stable_zb_sum[sel]) + stats.stable_zb_quad[sel])
    q_y = -0.5 * n * (LOG_2PI + 2 * np.log(sigma_ys)) - 0.5 * sq / sigma_ys ** 2
    return float(np.sum(e[sel] * (q_r + q_y)))


def update_stable_params(stats, dataset, previous):
    """Responsibility-weighted LMM updates for the stable group.

    ``previous`` is a :class:`ModelParameters`; its stable block is returned
    unchanged when no subject carries stable-group weight.
    """
    e = _stable_weights(stats)
    tot = e.sum()
    if not tot > 1e-12:
        _warn("no stable-group weight; stable parameters left unchanged")
        return (previous.stable_re_mean, previous.stable_re_cov, previous.stable_long_coef,
                previous.stable_long_sd)
    sel = e > 0
    e = e[sel]
    m = stats.stable_post_mean[sel]
    C = stats.stable_post_cov[sel]
    mu = (e @ m) / tot
    dev = m - mu
    Sigma = np.einsum("n,nij->ij", e, C + np.einsum("ni,nj->nij", dev, dev)) / tot
    Sigma = 0.5 * (Sigma + Sigma.T)
    vals, vecs = np.linalg.eigh(Sigma)
    if vals.min() < VAR_FLOOR:
        _warn("stable random-effect covariance floored at 1e-8 (weight starvation)")
        Sigma = (vecs * np.maximum(vals, VAR_FLOOR)) @ vecs.T
    p = dataset.packed
    xs = p.xs[sel]
    n = p.n_obs[sel]
    y = p.y[sel]
    A = xs.T @ ((e * n)[:, None] * xs)
    rhs = xs.T @ (e * (y.sum(1) - stats.stable_zb_sum[sel]))
    beta = _solve_normal(A, rhs, "stable longitudinal update")
    xb = xs @ beta
    sq = (np.sum(y * y, 1) - 2 * xb * y.sum(1) + n * xb * xb
          - 2 * (stats.stable_y_zb[sel] - xb * stats.stable_zb_sum[sel]) + stats.stable_zb_quad[sel])
    var = np.sum(e * sq) / np.sum(e * n)
    if var < VAR_FLOOR:
        _warn(f"stable residual variance {var:.3g} clipped at {VAR_FLOOR}")
        var = VAR_FLOOR
    return mu, Sigma, beta, float(np.sqrt(var))


# ----------------------------------------------------------------------------
# truncated random-effect block

@dataclass(frozen=True)
class ReSufficient:
    """Weighted statistics of the change-point draws needed by Q_R."""

    total: float
    first: np.ndarray  # sum cw * rbar
    second: np.ndarray  # sum cw * (rbar rbar^T + blockdiag(0, cov_b))
    upper: np.ndarray  # e^{t*} per retained draw (or unique bound)
    upper_weight: np.ndarray

    @classmethod
    def from_stats(cls, stats):
        cw = stats.cp_weight[stats.draw_subject] * stats.weight
        keep = cw > 0
        cw = cw[keep]
        rbar = np.column_stack([stats.omega[keep], stats.b_mean[keep]])
        second = np.einsum("d,di,dj->ij", cw, rbar, rbar)
        second[1:, 1:] += np.einsum("d,dij->ij", cw, stats.b_cov[keep])
        with np.errstate(over="ignore"):
            upper = np.exp(stats.t_star[keep])
        # draws sharing a bound (event subjects) collapse to one term
        uniq, inv = np.unique(upper, return_inverse=True)
        uw = np.bincount(inv, weights=cw)
        return cls(float(cw.sum()), cw @ rbar, second, uniq, uw)


_PHI_ONE = 8.5  # Phi(b) == 1 in double precision beyond this
_FTOL = 1e-11  # relative objective tolerance; far below Monte Carlo noise in Q


def _log_trunc_terms(mu_w, sd_w, upper):
    """``log Z`` and its partials wrt (mu_w, sd_w) for Z = P(0 < omega < upper)."""
    a = -mu_w / sd_w
    b = (upper - mu_w) / sd_w
    near = b < _PHI_ONE
    logz = np.full(b.shape, float(log_ndtr(-a)))  # upper bound effectively infinite
    if near.any() and a <= 0:
        lb = log_ndtr(b[near])
        logz[near] = lb + np.log(-np.expm1(float(log_ndtr(a)) - lb))
    elif near.any():
        logz[near] = log_ndtr_diff(np.full(int(near.sum()), a), b[near])
    log_phi_a = -0.5 * (LOG_2PI + a * a)
    bb = np.where(near, b, 0.0)
    ra = np.exp(log_phi_a - logz)
    rb = np.where(near, np.exp(-0.5 * (LOG_2PI + bb * bb) - logz), 0.0)
    d_mu = (ra - rb) / sd_w
    d_sd = (a * ra - bb * rb) / sd_w
    return logz, d_mu, d_sd


def q_r_objective(mu_r, p_vech, suff):
    """Q_R value and gradient wrt (mu_r, vech(P_r)).

    ``suff`` is a :class:`ReSufficient` (or EStepStats, converted on the
    fly).  The b-part of each draw enters through its posterior mean with a
    trace correction for its posterior covariance.
    """
    if not isinstance(suff, ReSufficient):
        suff = ReSufficient.from_stats(suff)
    mu = np.asarray(mu_r, dtype=float)
    O = pvech_to_chol(np.asarray(p_vech, dtype=float))
    Oinv = np.linalg.inv(O)
    Sinv = Oinv.T @ Oinv
    logdet = 2.0 * np.sum(np.log(np.diag(O)))
    W = suff.total
    S = suff.second - np.outer(mu, suff.first) - np.outer(suff.first, mu) + W * np.outer(mu, mu)
    value = -0.5 * W * (4 * LOG_2PI + logdet) - 0.5 * np.sum(Sinv * S)
    g_mu = Sinv @ (suff.first - W * mu)
    G = -0.5 * W * Sinv + 0.5 * Sinv @ S @ Sinv
    g_O = 2.0 * G @ O
    g_O[np.diag_indices(4)] *= np.diag(O)
    g_p = vech(g_O)

    sd_w = O[0, 0]
    if not sd_w > 0:
        raise FactorizationError("sd of the change point collapsed")
    logz, d_mu, d_sd = _log_trunc_terms(mu[0], sd_w, suff.upper)
    if not np.all(np.isfinite(logz)):
        raise FloatingPointError("truncation normalizer underflowed for the change-point law")
    uw = suff.upper_weight
    value -= float(uw @ logz)
    g_mu = g_mu.copy()
    g_mu[0] -= float(uw @ d_mu)
    g_p[0] -= float(uw @ d_sd) * sd_w
    return float(value), np.concatenate([g_mu, g_p])


def update_re_params(stats, init_mean, init_cov, config=None):
    """Maximize Q_R by L-BFGS-B over (mu_r, vech(P_r)) from a warm start."""
    config = config or LbfgsConfig()
    suff = stats if isinstance(stats, ReSufficient) else ReSufficient.from_stats(stats)
    lo, hi = np.asarray(config.box_lower), np.asarray(config.box_upper)
    x0 = np.clip(np.concatenate([init_mean, cov_to_pvech(init_cov)]), lo, hi)
    scale = max(suff.total, 1e-12)

    def fun(x):
        v, g = q_r_objective(x[:4], x[4:], suff)
        return -v / scale, -g / scale

    f0, _ = fun(x0)
    res = minimize(fun, x0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                   options={"maxcor": config.memory, "maxiter": config.max_iter,
                            "gtol": config.grad_tol, "ftol": _FTOL})
    x = res.x
    if not np.isfinite(res.fun) or res.fun > f0:
        logger.debug("L-BFGS-B did not improve Q_R (%s); keeping warm start", res.message)
        x = x0
    elif res.status == 1:
        _warn("L-BFGS-B reached max_iter in the random-effect update; using best iterate")
    mean = x[:4].copy()
    cov = pvech_to_cov(x[4:])
    cov = 0.5 * (cov + cov.T)
    cholesky(cov)
    return mean, cov
