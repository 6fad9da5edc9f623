"""Numerical kernels: Gaussian densities and conditioning, truncated normals,
the partially truncated MVN used for (change point, random effects), and the
log-normal AFT density / survival function.

All densities are evaluated on the log scale.  Samplers take a
``numpy.random.Generator`` and are deterministic given its state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import log_ndtr, ndtri_exp

from .exceptions import DomainError, FactorizationError, SamplingError

LOG_2PI = np.log(2.0 * np.pi)


def cholesky(cov):
    """Lower Cholesky factor, raising :class:`FactorizationError` if not SPD."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"matrix is not positive definite: {exc}") from None


def mvn_logpdf(x, mean, cov):
    """Log density of N(mean, cov) at ``x``.

    ``x`` may carry leading batch dimensions; the last axis is the event
    dimension.  The covariance is factorized once, never inverted.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    d = cov.shape[0]
    if x.shape[-1] != d or mean.shape[-1] != d:
        raise ValueError(f"dimension mismatch: x {x.shape}, mean {mean.shape}, cov {cov.shape}")
    L = cholesky(cov)
    diff = (x - mean).reshape(-1, d)
    z = linalg.solve_triangular(L, diff.T, lower=True)
    maha = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * (d * LOG_2PI + logdet + maha)
    return out.reshape(x.shape[:-1]) if x.ndim > 1 else float(out[0])


def mvn_condition(mean, cov, omega):
    """Moments of the trailing block given the first coordinate.

    Returns ``(mean_b, cov_b)`` with
    ``mean_b = mu_b + s_bw (omega - mu_w) / s_ww`` and
    ``cov_b = S_bb - s_bw s_bw^T / s_ww``.  ``omega`` may be an array, in
    which case ``mean_b`` gains its shape as leading dimensions; ``cov_b``
    does not depend on ``omega``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    s_ww = cov[0, 0]
    if not s_ww > 0:
        raise DomainError(f"variance of the conditioning coordinate must be positive, got {s_ww}")
    s_bw = cov[1:, 0]
    slope = s_bw / s_ww
    omega = np.asarray(omega, dtype=float)
    mean_b = mean[1:] + np.multiply.outer(omega - mean[0], slope)
    cov_b = cov[1:, 1:] - np.outer(s_bw, s_bw) / s_ww
    return mean_b, cov_b


def log_ndtr_diff(lo, hi):
    """``log(Phi(hi) - Phi(lo))`` for ``lo <= hi``, accurate in both tails."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    flip = lo > 0
    a = np.where(flip, -hi, lo)
    b = np.where(flip, -lo, hi)
    la = log_ndtr(a)
    lb = log_ndtr(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lb + np.log(-np.expm1(la - lb))
    out = np.where(b <= a, -np.inf, out)
    return out if out.ndim else float(out)


def truncnorm_ppf(u, mu, sigma, a, b):
    """Inverse CDF of N(mu, sigma^2) truncated to (a, b), evaluated at ``u``.

    Computed entirely on the log-probability scale (``ndtri_exp``) after
    reflecting intervals that lie above the mean, so the far tails keep full
    precision.  Results are clipped to the open interval.
    """
    u, mu, sigma, a, b = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (u, mu, sigma, a, b))
    )
    alpha = (a - mu) / sigma
    beta = (b - mu) / sigma
    flip = alpha > 0
    lo = np.where(flip, -beta, alpha)
    hi = np.where(flip, -alpha, beta)
    # under reflection the quantile u becomes 1 - u; swap the log weights
    # instead of forming 1 - u so both ends keep full precision
    with np.errstate(divide="ignore"):
        lu, l1u = np.log(u), np.log1p(-u)
        logp = np.logaddexp(log_ndtr(lo) + np.where(flip, lu, l1u), log_ndtr(hi) + np.where(flip, l1u, lu))
    z = ndtri_exp(logp)
    z = np.where(flip, -z, z)
    x = mu + sigma * z
    x = np.clip(x, np.nextafter(a, np.inf), np.nextafter(b, -np.inf))
    return x if x.ndim else float(x)


@dataclass(frozen=True)
class TruncatedNormal1D:
    """N(mu, sigma^2) restricted to the open interval (a, b)."""

    mu: float
    sigma: float
    a: float = -np.inf
    b: float = np.inf

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if not self.a < self.b:
            raise DomainError(f"empty interval ({self.a}, {self.b})")

    @property
    def log_normalizer(self):
        return log_ndtr_diff((self.a - self.mu) / self.sigma, (self.b - self.mu) / self.sigma)

    @property
    def normalizer(self):
        return float(np.exp(self.log_normalizer))

    def sample(self, rng, size=None):
        return truncnorm_sample(self, rng, size)


def truncnorm_sample(dist, rng, size=None):
    """Draw from a :class:`TruncatedNormal1D` by log-scale inverse CDF."""
    if not np.isfinite(dist.log_normalizer):
        raise SamplingError(
            f"truncated normal on ({dist.a}, {dist.b}) with mu={dist.mu}, sigma={dist.sigma} "
            "has no representable mass; work with log-scale bounds or recentre the interval"
        )
    u = rng.random(size)
    return truncnorm_ppf(u, dist.mu, dist.sigma, dist.a, dist.b)


@dataclass(frozen=True)
class Ptmvn:
    """Four-dimensional normal (omega, b0, b1, b2) truncated on omega only."""

    mean: np.ndarray
    cov: np.ndarray
    lower: float = 0.0
    upper: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))
        if not self.upper > self.lower:
            raise DomainError(f"upper bound {self.upper} must exceed lower bound {self.lower}")
        cholesky(self.cov)

    @property
    def omega_marginal(self):
        return TruncatedNormal1D(self.mean[0], np.sqrt(self.cov[0, 0]), self.lower, self.upper)

    def sample(self, rng, size=None):
        return ptmvn_sample(self, rng, size)


def ptmvn_draw(mean, cov, lower, upper, u, eps):
    """Transform uniforms ``u`` and standard normals ``eps`` (shape (..., 3))
    into PTMVN draws; ``lower``/``upper`` broadcast against ``u``.

    omega comes from its truncated marginal; b | omega is exactly Gaussian
    because the truncation only touches omega.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    sd_w = np.sqrt(cov[0, 0])
    omega = truncnorm_ppf(u, mean[0], sd_w, lower, upper)
    mean_b, cov_b = mvn_condition(mean, cov, omega)
    Lb = cholesky(cov_b)
    b = mean_b + np.asarray(eps) @ Lb.T
    return np.concatenate([np.asarray(omega)[..., None], b], axis=-1)


def ptmvn_sample(dist, rng, size=None):
    """Exact, rejection-free PTMVN sampling by marginal-then-conditional."""
    if not np.isfinite(dist.omega_marginal.log_normalizer):
        raise SamplingError(
            f"PTMVN truncation ({dist.lower}, {dist.upper}] carries no mass under "
            f"N({dist.mean[0]}, {dist.cov[0, 0]})"
        )
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    u = rng.random(shape)
    eps = rng.standard_normal(shape + (3,))
    return ptmvn_draw(dist.mean, dist.cov, dist.lower, dist.upper, u, eps)


def _aft_check(t_event, sigma_tte):
    t_event = np.asarray(t_event, dtype=float)
    if np.any(t_event <= 0):
        raise DomainError(f"event times must be positive, got min {t_event.min()}")
    if not sigma_tte > 0:
        raise DomainError(f"sigma_tte must be positive, got {sigma_tte}")
    return t_event


def lognormal_aft_logdensity(t_event, w, gamma, sigma_tte):
    """Log density (natural time scale) of the log-normal AFT model."""
    t_event = _aft_check(t_event, sigma_tte)
    loc = np.asarray(w, dtype=float) @ np.asarray(gamma, dtype=float)
    logt = np.log(t_event)
    z = (logt - loc) / sigma_tte
    out = -0.5 * LOG_2PI - np.log(sigma_tte) - 0.5 * z * z - logt
    return out if np.ndim(out) else float(out)


def lognormal_aft_logsurvival(t_event, w, gamma, sigma_tte):
    """``log P(T > t_event)`` via the log complementary normal CDF."""
    t_event = _aft_check(t_event, sigma_tte)
    loc = np.asarray(w, dtype=float) @ np.asarray(gamma, dtype=float)
    z = (np.log(t_event) - loc) / sigma_tte
    out = log_ndtr(-z)
    return out if np.ndim(out) else float(out)
