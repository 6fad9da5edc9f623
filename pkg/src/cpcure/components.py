"""Submodel building blocks: design matrices, Gaussian marginals and
conjugate posteriors of the random effects for both groups.

The public per-subject functions wrap batched kernels that operate on
zero-padded arrays (one row per draw or per subject), which is what the
E-step uses.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .distributions import LOG_2PI, cholesky, mvn_condition
from .exceptions import FactorizationError


class BPosterior(NamedTuple):
    mean: np.ndarray
    cov: np.ndarray


class LinearGaussianTerms(NamedTuple):
    """Per-row outputs of :func:`linear_gaussian`."""

    loglik: np.ndarray  # log N(y; X beta + Z m, Z V Z^T + sigma^2 I)
    post_mean: np.ndarray  # (D, q)
    post_cov: np.ndarray  # (D, q, q)
    ztz: np.ndarray  # (D, q, q)
    zb: np.ndarray  # (D, m)  Z @ post_mean


def piecewise_design(visit_times, omega, mask=None):
    """Rows ``(1, d * I(d <= 0), d * I(d > 0))`` with ``d = s - omega``.

    Broadcasts: ``visit_times`` (..., m) against ``omega`` (...,).  Padded
    visits (``mask`` False) get all-zero rows.
    """
    s = np.asarray(visit_times, dtype=float)
    omega = np.asarray(omega, dtype=float)
    d = s - omega[..., None]
    pre = d <= 0
    Z = np.stack([np.ones_like(d), np.where(pre, d, 0.0), np.where(pre, 0.0, d)], axis=-1)
    if mask is not None:
        Z = Z * np.asarray(mask)[..., None]
    return Z


def stable_design(visit_times, mask=None):
    s = np.asarray(visit_times, dtype=float)
    Z = np.stack([np.ones_like(s), s], axis=-1)
    if mask is not None:
        Z = Z * np.asarray(mask)[..., None]
    return Z


def _prior_terms(prior_cov):
    L = cholesky(prior_cov)
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv, 2.0 * np.sum(np.log(np.diag(L)))


def linear_gaussian(resid, Z, n_obs, prior_mean, prior_cov, sigma):
    """Batched marginal likelihood and posterior for ``r = Z b + e``.

    ``resid`` (D, m) is ``y - X beta`` (zero on padding), ``Z`` (D, m, q),
    ``prior_mean`` (D, q) or (q,), ``prior_cov`` (q, q) shared by all rows,
    ``sigma`` the residual standard deviation.  Uses the determinant lemma
    and Woodbury identity so only q x q systems are factorized.
    """
    prior_mean = np.broadcast_to(prior_mean, Z.shape[:-2] + Z.shape[-1:])
    Vinv, logdetV = _prior_terms(prior_cov)
    s2 = sigma * sigma
    e = resid - np.einsum("...mq,...q->...m", Z, prior_mean)
    ztz = np.einsum("...mq,...mr->...qr", Z, Z)
    g = np.einsum("...mq,...m->...q", Z, e) / s2
    A = Vinv + ztz / s2
    LA = cholesky(A)
    logdetA = 2.0 * np.sum(np.log(np.diagonal(LA, axis1=-2, axis2=-1)), axis=-1)
    Ainv = np.linalg.inv(A)
    Ainv = 0.5 * (Ainv + np.swapaxes(Ainv, -1, -2))
    sol = np.einsum("...qr,...r->...q", Ainv, g)
    quad = np.sum(e * e, axis=-1) / s2 - np.sum(g * sol, axis=-1)
    n = np.asarray(n_obs, dtype=float)
    loglik = -0.5 * (n * (LOG_2PI + np.log(s2)) + logdetV + logdetA + quad)
    post_mean = prior_mean + sol
    zb = np.einsum("...mq,...q->...m", Z, post_mean)
    return LinearGaussianTerms(loglik, post_mean, Ainv, ztz, zb)


def second_moment(post: BPosterior, center):
    """``E[(b - center)(b - center)^T]`` under a Gaussian posterior."""
    d = np.asarray(post.mean) - np.asarray(center)
    return np.asarray(post.cov) + np.einsum("...i,...j->...ij", d, d)


# ----------------------------------------------------------------------------
# stable group

def _stable_inputs(subject, params):
    s = subject.visit_times
    resid = subject.outcomes - subject.stable_covariates @ params.stable_long_coef
    return resid[None], stable_design(s)[None], np.array([s.size])


def stable_marginal_loglik(subject, params):
    """``log P(y | stable)`` with the random effects integrated out."""
    resid, Z, n = _stable_inputs(subject, params)
    out = linear_gaussian(resid, Z, n, params.stable_re_mean, params.stable_re_cov,
                          params.stable_long_sd)
    return float(out.loglik[0])


def stable_b_posterior(subject, params):
    """Conjugate Gaussian posterior of the stable-group random effects.

    Returns ``(BPosterior, second_moment)`` where the second moment is
    centred at the prior mean.
    """
    resid, Z, n = _stable_inputs(subject, params)
    out = linear_gaussian(resid, Z, n, params.stable_re_mean, params.stable_re_cov,
                          params.stable_long_sd)
    post = BPosterior(out.post_mean[0], out.post_cov[0])
    return post, second_moment(post, params.stable_re_mean)


# ----------------------------------------------------------------------------
# change-point group

class CpTerms(NamedTuple):
    """Per-draw outputs of :func:`cp_terms`."""

    loglik: np.ndarray  # log f(y | omega)
    post_mean: np.ndarray  # (D, 3)
    post_cov: np.ndarray  # (D, 3, 3)
    zb_sum: np.ndarray  # 1^T Z m
    y_zb: np.ndarray  # y^T Z m
    zb_quad: np.ndarray  # E[b^T Z^T Z b | y, omega]


def sym3_inverse(a, b, c, d, e, f):
    """Inverse and log-determinant of stacked SPD matrices
    [[a, b, c], [b, d, e], [c, e, f]] by cofactors."""
    c00 = d * f - e * e
    c01 = c * e - b * f
    c02 = b * e - c * d
    c11 = a * f - c * c
    c12 = b * c - a * e
    c22 = a * d - b * b
    det = a * c00 + b * c01 + c * c02
    if np.any(~(det > 0)):
        raise FactorizationError("posterior precision of the random effects is not positive definite")
    inv = np.stack([
        np.stack([c00, c01, c02], -1),
        np.stack([c01, c11, c12], -1),
        np.stack([c02, c12, c22], -1),
    ], -2) / det[..., None, None]
    return inv, np.log(det)


class CrossProducts(NamedTuple):
    """Sums over visits that determine ``Z(omega)^T Z(omega)`` and
    ``Z(omega)^T y``: with ``d = s - omega``, ``pre = d * I(d <= 0)`` and
    ``post = d * I(d > 0)``."""

    S1: np.ndarray  # sum pre
    S2: np.ndarray  # sum post
    S11: np.ndarray  # sum pre^2
    S22: np.ndarray  # sum post^2
    Y1: np.ndarray  # sum y * pre
    Y2: np.ndarray  # sum y * post


def cross_products(y, s, mask, omega):
    """Direct O(D m) evaluation on zero-padded (D, m) arrays."""
    d = s - np.asarray(omega, dtype=float)[:, None]
    pre = np.minimum(d, 0.0)
    post = np.maximum(d, 0.0)
    if mask is not None:
        pre *= mask
        post *= mask
    return CrossProducts(pre.sum(1), post.sum(1), np.einsum("dm,dm->d", pre, pre),
                         np.einsum("dm,dm->d", post, post), np.einsum("dm,dm->d", y, pre),
                         np.einsum("dm,dm->d", y, post))


class VisitPrefix:
    """Per-subject prefix sums of (s, s^2, y, y s) so the cross-products for
    any omega cost one binary search plus O(1) arithmetic.

    Visits with ``s <= omega`` are the pre-change block; a visit exactly at
    omega contributes zero to every sum, so ties need no special care.
    """

    def __init__(self, s, y, mask, n_obs):
        n, m = s.shape
        s = np.where(mask, s, 0.0)
        y = np.where(mask, y, 0.0)
        z = np.zeros((n, 1))
        self.c1 = np.hstack([z, np.cumsum(s, 1)])
        self.c2 = np.hstack([z, np.cumsum(s * s, 1)])
        self.cy = np.hstack([z, np.cumsum(y, 1)])
        self.cys = np.hstack([z, np.cumsum(y * s, 1)])
        self.n_obs = np.asarray(n_obs)
        self.m = m
        rows = np.arange(n)
        last = self.n_obs
        self.t1, self.t2 = self.c1[rows, last], self.c2[rows, last]
        self.ty, self.tys = self.cy[rows, last], self.cys[rows, last]
        self.yy = np.einsum("nm,nm->n", y, y)
        # visits of subject i live in (i * span, i * span + cap]
        smax = float(np.max(np.where(mask, s, 0.0))) if s.size else 0.0
        self._cap = smax + 1.0
        self._span = 4.0 * (self._cap + 1.0)
        keys = np.where(mask, s, 0.5 * self._span) + (rows * self._span)[:, None]
        self._keys = keys.ravel()

    @classmethod
    def from_packed(cls, packed):
        return cls(packed.s, packed.y, packed.mask, packed.n_obs)

    def split(self, subj, omega):
        """Number of visits with ``s <= omega`` for each (subject, omega) row."""
        q = np.clip(omega, -1.0, self._cap) + subj * self._span
        return np.searchsorted(self._keys, q, side="right") - subj * self.m

    def cross_products(self, subj, omega):
        omega = np.asarray(omega, dtype=float)
        J = self.split(subj, omega)
        nJ = self.n_obs[subj] - J
        p1, p2 = self.c1[subj, J], self.c2[subj, J]
        py, pys = self.cy[subj, J], self.cys[subj, J]
        q1, q2 = self.t1[subj] - p1, self.t2[subj] - p2
        qy, qys = self.ty[subj] - py, self.tys[subj] - pys
        return CrossProducts(
            p1 - J * omega,
            q1 - nJ * omega,
            np.maximum(p2 - 2.0 * omega * p1 + J * omega * omega, 0.0),
            np.maximum(q2 - 2.0 * omega * q1 + nJ * omega * omega, 0.0),
            pys - omega * py,
            qys - omega * qy,
        )


def cp_terms_from_cross(cp, n_obs, Y0, YY, xb, omega, params):
    """Batched ``f(y | omega)`` and ``b | y, omega`` given the cross-products.

    ``Y0`` and ``YY`` are the per-row sums of y and y^2, ``xb`` the
    fixed-effect offset.  All remaining work is 3 x 3 algebra in closed
    form (Woodbury identity and determinant lemma).
    """
    omega = np.asarray(omega, dtype=float)
    m, cov_b = mvn_condition(params.re_mean, params.re_cov, omega)
    Vinv, logdetV = _prior_terms(cov_b)
    s2 = params.long_sd ** 2
    n = np.asarray(n_obs, dtype=float)
    S1, S2, S11, S22, Y1, Y2 = cp
    # Z^T r with r = y - xb, and r^T r
    r0, r1, r2 = Y0 - xb * n, Y1 - xb * S1, Y2 - xb * S2
    rr = YY - 2.0 * xb * Y0 + n * xb * xb
    m0, m1, m2 = m[:, 0], m[:, 1], m[:, 2]
    # Z^T Z m
    k0 = n * m0 + S1 * m1 + S2 * m2
    k1 = S1 * m0 + S11 * m1
    k2 = S2 * m0 + S22 * m2
    e0, e1, e2 = r0 - k0, r1 - k1, r2 - k2
    ete = rr - 2.0 * (m0 * r0 + m1 * r1 + m2 * r2) + m0 * k0 + m1 * k1 + m2 * k2
    Ainv, logdetA = sym3_inverse(Vinv[0, 0] + n / s2, Vinv[0, 1] + S1 / s2, Vinv[0, 2] + S2 / s2,
                                 Vinv[1, 1] + S11 / s2, Vinv[1, 2] + 0.0 * S1, Vinv[2, 2] + S22 / s2)
    g = np.stack([e0, e1, e2], -1) / s2
    sol = np.einsum("dqr,dr->dq", Ainv, g)
    quad = ete / s2 - np.sum(g * sol, -1)
    loglik = -0.5 * (n * (LOG_2PI + np.log(s2)) + logdetV + logdetA + quad)
    pm = m + sol
    p0, p1, p2 = pm[:, 0], pm[:, 1], pm[:, 2]
    zb_sum = n * p0 + S1 * p1 + S2 * p2
    y_zb = Y0 * p0 + Y1 * p1 + Y2 * p2
    C = Ainv
    tr = (n * C[:, 0, 0] + S11 * C[:, 1, 1] + S22 * C[:, 2, 2]
          + 2.0 * (S1 * C[:, 0, 1] + S2 * C[:, 0, 2]))
    pq = n * p0 * p0 + S11 * p1 * p1 + S22 * p2 * p2 + 2.0 * p0 * (S1 * p1 + S2 * p2)
    return CpTerms(loglik, pm, Ainv, zb_sum, y_zb, tr + pq)


def cp_terms(y, s, mask, n_obs, xb, omega, params):
    """Batched ``f(y | omega)`` and ``b | y, omega`` on zero-padded (D, m)
    rows; the cross-products are summed directly."""
    cp = cross_products(y, s, mask, omega)
    return cp_terms_from_cross(cp, n_obs, y.sum(1), np.einsum("dm,dm->d", y, y), xb, omega, params)


def _cp_inputs(subject, omega, params):
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    D = omega.size
    y = np.broadcast_to(subject.outcomes, (D, subject.n_obs))
    s = np.broadcast_to(subject.visit_times, (D, subject.n_obs))
    xb = np.full(D, subject.long_covariates @ params.long_coef)
    return y, s, None, np.full(D, subject.n_obs), xb, omega


def cp_y_marginal_given_omega(subject, omega, params):
    """``log f(y | omega, change-point group)``; vectorized over ``omega``."""
    out = cp_terms(*_cp_inputs(subject, omega, params), params).loglik
    return float(out[0]) if np.ndim(omega) == 0 else out


def cp_b_posterior(subject, omega, params):
    """Gaussian law of ``b | y, omega`` in the change-point group."""
    out = cp_terms(*_cp_inputs(subject, omega, params), params)
    if np.ndim(omega) == 0:
        return BPosterior(out.post_mean[0], out.post_cov[0])
    return BPosterior(out.post_mean, out.post_cov)
