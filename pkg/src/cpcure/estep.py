"""Monte Carlo E-step.

For each change-point-eligible subject, (t*, omega) are drawn from their
model conditionals (t* fixed at the observed log time for events, drawn
from the AFT law truncated to (t_i, inf) otherwise; omega from its
truncated marginal on (0, e^{t*})) and self-normalized importance weights
proportional to f(y | omega) are attached.  The random effects b are
integrated analytically: every draw carries the Gaussian posterior of
b | y, omega.  Stable-group posteriors are closed form.
"""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import log_ndtr

from .components import (
    BPosterior,
    VisitPrefix,
    cp_terms_from_cross,
    linear_gaussian,
    piecewise_design,
    stable_design,
)
from .distributions import lognormal_aft_logdensity, truncnorm_ppf
from .exceptions import DegeneracyError, SamplingError

logger = logging.getLogger(__name__)

DEFAULT_DRAWS = 500
ESS_FLOOR = 0.1
REDRAW_FACTOR = 4


def subject_rng(seed, iteration, subject_id, stage=0):
    """Independent stream keyed by (seed, iteration, subject id, stage)."""
    key = zlib.crc32(str(subject_id).encode("utf-8"))
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(iteration) & 0xFFFFFFFF, key, int(stage)])


class WeightedDraw(NamedTuple):
    t_star: float
    omega: float
    weight: float
    b_post: BPosterior


@dataclass(frozen=True, eq=False)
class EStepStats:
    """Per-subject E-step output plus the flat array of weighted draws.

    Draws of subject ``i`` occupy ``offsets[i]:offsets[i + 1]``; subjects
    with no draws (never happens in the full model) have empty slices.
    """

    subject_ids: list
    event: np.ndarray
    responsibility: np.ndarray  # E[Delta_i]
    cp_weight: np.ndarray  # nu_i + (1 - nu_i)(1 - E[Delta_i])
    offsets: np.ndarray
    draw_subject: np.ndarray
    t_star: np.ndarray
    omega: np.ndarray
    weight: np.ndarray
    b_mean: np.ndarray
    b_cov: np.ndarray
    zb_sum: np.ndarray  # per draw: 1^T Z m
    y_zb: np.ndarray  # per draw: y^T Z m
    zb_quad: np.ndarray  # per draw: E[b^T Z^T Z b | omega, y]
    ess: np.ndarray
    log_evidence_cp: np.ndarray
    log_evidence_cp_var: np.ndarray
    log_evidence_stable: np.ndarray
    stable_post_mean: np.ndarray
    stable_post_cov: np.ndarray
    stable_zb_sum: np.ndarray
    stable_y_zb: np.ndarray
    stable_zb_quad: np.ndarray
    subject_loglik: np.ndarray
    subject_loglik_var: np.ndarray

    @property
    def n(self):
        return len(self.subject_ids)

    @property
    def draws_per_subject(self):
        return np.diff(self.offsets)

    @property
    def stable_post_second_moment(self):
        return self.stable_post_cov + np.einsum("ni,nj->nij", self.stable_post_mean, self.stable_post_mean)

    @property
    def loglik(self):
        return float(np.sum(self.subject_loglik))

    @property
    def loglik_se(self):
        return float(np.sqrt(np.sum(self.subject_loglik_var)))

    def draws(self, i):
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return [
            WeightedDraw(float(self.t_star[k]), float(self.omega[k]), float(self.weight[k]),
                         BPosterior(self.b_mean[k], self.b_cov[k]))
            for k in range(lo, hi)
        ]

    def expect(self, values):
        """Per-subject weighted mean of a per-draw quantity (first axis)."""
        values = np.asarray(values, dtype=float)
        out = np.zeros((self.n,) + values.shape[1:])
        has = self.draws_per_subject > 0
        wv = self.weight.reshape((-1,) + (1,) * (values.ndim - 1)) * values
        out[has] = np.add.reduceat(wv, self.offsets[:-1][has], axis=0)
        return out

    def mc_se(self, values):
        """Delta-method standard error of :meth:`expect` (self-normalized IS)."""
        values = np.asarray(values, dtype=float)
        mean = self.expect(values)
        dev = values - mean[self.draw_subject]
        w = self.weight.reshape((-1,) + (1,) * (values.ndim - 1))
        return np.sqrt(self._sum(w * w * dev * dev))

    def _sum(self, values):
        out = np.zeros((self.n,) + values.shape[1:])
        has = self.draws_per_subject > 0
        out[has] = np.add.reduceat(values, self.offsets[:-1][has], axis=0)
        return out

    def expected_zb(self, dataset):
        """Per-subject ``E[Z b]`` at each visit (n, m_max), zero on padding."""
        p = dataset.packed
        rows = self.draw_subject
        Z = piecewise_design(p.s[rows], self.omega, p.mask[rows])
        zb = np.einsum("dmq,dq->dm", Z, self.b_mean)
        return self.expect(zb)

    def diagnostics(self):
        cens = ~self.event
        return {
            "ess_min": float(self.ess.min()),
            "ess_median": float(np.median(self.ess)),
            "responsibility_mean_censored": float(self.responsibility[cens].mean()) if cens.any() else 0.0,
        }

    def diagnostic_rows(self):
        """(subject id, ess, responsibility) rows for the optional diagnostic CSV."""
        return list(zip(self.subject_ids, self.ess.tolist(), self.responsibility.tolist()))


def responsibility(log_evidence_stable, log_evidence_cp, stable_rate, subject_id=None):
    """Posterior probability of stable-group membership for a censored subject."""
    with np.errstate(divide="ignore"):
        a = np.log(stable_rate) + np.asarray(log_evidence_stable, dtype=float)
        b = np.log1p(-stable_rate) + np.asarray(log_evidence_cp, dtype=float)
    den = np.logaddexp(a, b)
    if np.any(~np.isfinite(den)):
        bad = subject_id if subject_id is not None else np.flatnonzero(~np.isfinite(np.atleast_1d(den))).tolist()
        raise DegeneracyError(f"both group evidences vanish for subject(s) {bad}", [bad])
    out = np.exp(a - den)
    return float(out) if np.ndim(out) == 0 else out


def _draw_block(packed, idx, params, K, seed, iteration, stage, ids):
    """Draw K (t*, omega) pairs for each subject in ``idx``."""
    n_b = idx.size
    u = np.empty((n_b, K, 2))
    for r, i in enumerate(idx):
        u[r] = subject_rng(seed, iteration, ids[i], stage).random((K, 2))
    t = packed.t[idx]
    loc = packed.w[idx] @ params.tte_coef
    event = packed.event[idx]
    tstar = np.where(
        event[:, None],
        t[:, None],
        truncnorm_ppf(u[..., 0], loc[:, None], params.tte_sd, t[:, None], np.inf),
    )
    if not np.all(np.isfinite(tstar)):
        bad = [ids[i] for i in idx[~np.all(np.isfinite(tstar), axis=1)]]
        raise SamplingError(f"event-time tail sampling failed for subject(s) {bad}")
    sd_w = np.sqrt(params.re_cov[0, 0])
    with np.errstate(over="ignore"):
        upper = np.exp(tstar)
    omega = truncnorm_ppf(u[..., 1], params.re_mean[0], sd_w, 0.0, upper)
    return tstar.ravel(), omega.ravel(), np.repeat(idx, K)


def _evaluate(packed, prefix, subj, omega, params):
    """Per-draw likelihood terms for draws ``omega`` of subjects ``subj``."""
    xb = (packed.x @ params.long_coef)[subj]
    cp = prefix.cross_products(subj, omega)
    t = cp_terms_from_cross(cp, packed.n_obs[subj], prefix.ty[subj], prefix.yy[subj], xb, omega, params)
    return t._asdict()


def _normalize(loglik, offsets, ids):
    """Self-normalized weights, log mean likelihood, ESS and the delta-method
    variance of the log mean, per contiguous block of draws."""
    starts = offsets[:-1]
    counts = np.diff(offsets)
    seg = np.repeat(np.arange(counts.size), counts)
    top = np.maximum.reduceat(loglik, starts)
    bad = ~np.isfinite(top)
    if bad.any():
        bad_ids = [ids[i] for i in np.flatnonzero(bad)]
        raise DegeneracyError(
            f"all importance weights underflow for subject(s) {bad_ids}; increase the number "
            "of draws or reset the parameters",
            bad_ids,
        )
    ex = np.exp(loglik - top[seg])
    tot = np.add.reduceat(ex, starts)
    weight = ex / tot[seg]
    s2 = np.add.reduceat(weight * weight, starts)
    log_mean = top + np.log(tot) - np.log(counts)
    return weight, log_mean, 1.0 / s2, np.maximum(s2 - 1.0 / counts, 0.0)


def run_estep(dataset, params, K=DEFAULT_DRAWS, seed=0, iteration=0, with_stable=True,
              ess_floor=ESS_FLOOR, redraw_factor=REDRAW_FACTOR):
    """Compute all E-step quantities for ``dataset`` at ``params``.

    Draw streams are keyed by subject id, so the output for a subject does
    not depend on where it sits in the dataset.  Subjects whose effective
    sample size falls below ``ess_floor * K`` are redrawn once with
    ``redraw_factor * K`` draws.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    packed = dataset.packed
    ids = dataset.ids
    n = packed.t.size
    idx = np.arange(n)
    prefix = VisitPrefix.from_packed(packed)
    tstar, omega, subj = _draw_block(packed, idx, params, K, seed, iteration, 0, ids)
    ev = _evaluate(packed, prefix, subj, omega, params)
    offsets = np.arange(n + 1) * K
    weight, log_mean, ess, var = _normalize(ev["loglik"], offsets, ids)

    low = np.flatnonzero(ess < ess_floor * K) if K > 1 else np.zeros(0, dtype=int)
    if low.size and redraw_factor > 1:
        K2 = redraw_factor * K
        t2, o2, s2 = _draw_block(packed, low, params, K2, seed, iteration, 1, ids)
        ev2 = _evaluate(packed, prefix, s2, o2, params)
        keep = ~np.isin(subj, low)
        order = np.argsort(np.concatenate([subj[keep], s2]), kind="stable")
        subj = np.concatenate([subj[keep], s2])[order]
        tstar = np.concatenate([tstar[keep], t2])[order]
        omega = np.concatenate([omega[keep], o2])[order]
        ev = {k: np.concatenate([v[keep], ev2[k]])[order] for k, v in ev.items()}
        counts = np.bincount(subj, minlength=n)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        weight, log_mean, ess, var = _normalize(ev["loglik"], offsets, ids)
        logger.debug("redrew %d subject(s) with K=%d", low.size, K2)

    event = packed.event
    loc = packed.w @ params.tte_coef
    log_surv = log_ndtr(-(packed.t - loc) / params.tte_sd)
    log_ev_cp = np.where(event, log_mean, log_surv + log_mean)

    st_mean = np.full((n, 2), np.nan)
    st_cov = np.full((n, 2, 2), np.nan)
    st_zb_sum = np.zeros(n)
    st_y_zb = np.zeros(n)
    st_quad = np.zeros(n)
    log_ev_st = np.full(n, -np.inf)
    cens = np.flatnonzero(~event)
    if with_stable and cens.size:
        mask = packed.mask[cens]
        resid = (packed.y[cens] - (packed.xs[cens] @ params.stable_long_coef)[:, None]) * mask
        Zs = stable_design(packed.s[cens], mask)
        terms = linear_gaussian(resid, Zs, packed.n_obs[cens], params.stable_re_mean,
                                params.stable_re_cov, params.stable_long_sd)
        log_ev_st[cens] = terms.loglik
        st_mean[cens] = terms.post_mean
        st_cov[cens] = terms.post_cov
        st_zb_sum[cens] = terms.zb.sum(axis=1)
        st_y_zb[cens] = np.sum(packed.y[cens] * terms.zb, axis=1)
        st_quad[cens] = np.einsum("dqr,drq->d", terms.ztz, terms.post_cov) + np.einsum(
            "dq,dqr,dr->d", terms.post_mean, terms.ztz, terms.post_mean)

    resp = np.zeros(n)
    pi = params.stable_rate if with_stable else 0.0
    if cens.size:
        try:
            resp[cens] = responsibility(log_ev_st[cens], log_ev_cp[cens], pi)
        except DegeneracyError as exc:
            bad = [ids[cens[k]] for k in exc.subject_ids[0]]
            raise DegeneracyError(f"both group evidences vanish for subject(s) {bad}", bad) from None
    cp_weight = np.where(event, 1.0, 1.0 - resp)

    with np.errstate(divide="ignore"):
        log_pi, log_1mpi = np.log(pi), np.log1p(-pi)
    ll = np.empty(n)
    ll_var = np.empty(n)
    if event.any():
        et = np.exp(packed.t[event])
        ll[event] = log_1mpi + lognormal_aft_logdensity(et, packed.w[event], params.tte_coef,
                                                        params.tte_sd) + log_mean[event]
        ll_var[event] = var[event]
    if cens.size:
        ll[cens] = np.logaddexp(log_pi + log_ev_st[cens], log_1mpi + log_ev_cp[cens])
        ll_var[cens] = (1.0 - resp[cens]) ** 2 * var[cens]

    w = weight
    return EStepStats(
        subject_ids=list(ids),
        event=event.copy(),
        responsibility=resp,
        cp_weight=cp_weight,
        offsets=offsets,
        draw_subject=subj,
        t_star=tstar,
        omega=omega,
        weight=w,
        b_mean=ev["post_mean"],
        b_cov=ev["post_cov"],
        zb_sum=ev["zb_sum"],
        y_zb=ev["y_zb"],
        zb_quad=ev["zb_quad"],
        ess=ess,
        log_evidence_cp=log_ev_cp,
        log_evidence_cp_var=var,
        log_evidence_stable=log_ev_st,
        stable_post_mean=st_mean,
        stable_post_cov=st_cov,
        stable_zb_sum=st_zb_sum,
        stable_y_zb=st_y_zb,
        stable_zb_quad=st_quad,
        subject_loglik=ll,
        subject_loglik_var=ll_var,
    )


def _single(subject, params, K, rng_seed, with_stable=True):
    from .data import StudyDataset

    return run_estep(StudyDataset((subject,)), params, K=K, seed=rng_seed, with_stable=with_stable,
                     redraw_factor=1)


def event_expectations(subject, params, K=DEFAULT_DRAWS, seed=0):
    """Weighted draws and ``log f(y | t, change-point group)`` for an event subject."""
    if not subject.event:
        raise ValueError(f"subject {subject.subject_id} is censored; use censored_expectations")
    st = _single(subject, params, K, seed, with_stable=False)
    return st.draws(0), float(st.log_evidence_cp[0])


def censored_expectations(subject, params, K=DEFAULT_DRAWS, seed=0):
    """Weighted draws and ``log P(t* > t, y | change-point group)`` for a censored subject."""
    if subject.event:
        raise ValueError(f"subject {subject.subject_id} has an observed event; use event_expectations")
    st = _single(subject, params, K, seed, with_stable=False)
    return st.draws(0), float(st.log_evidence_cp[0])
