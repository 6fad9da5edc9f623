"""MCEM driver: initialization, iteration, convergence, JSON results."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import ModelParameters
from .estep import run_estep
from .exceptions import CpcureError, ValidationError
from .mstep import (
    LbfgsConfig,
    cov_to_pvech,
    update_aft,
    update_long_cp,
    update_re_params,
    update_stable_params,
    update_stable_rate,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitConfig:
    """EM controls.

    The number of Monte Carlo draws per subject starts at ``draws_initial``
    and is multiplied by ``draws_growth`` every ``draws_every`` iterations,
    capped at ``draws_max``.  Convergence requires the scaled parameter
    change to stay below ``rel_tol`` for ``window`` consecutive iterations
    and the smoothed log-likelihood not to drop by more than two Monte
    Carlo standard errors.
    """

    max_em_iter: int = 100
    draws_initial: int = 200
    draws_growth: float = 1.5
    draws_every: int = 10
    draws_max: int = 5000
    rel_tol: float = 3e-3
    window: int = 3
    min_iter: int = 5
    seed: int = 0
    baseline_mode: bool = False
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)

    def __post_init__(self):
        if self.max_em_iter < 1:
            raise ValueError("max_em_iter must be >= 1")
        if self.draws_initial < 1 or self.draws_growth < 1:
            raise ValueError("draw schedule must be non-decreasing and start at >= 1")


    def draws(self, iteration):
        k = self.draws_initial * self.draws_growth ** (iteration // self.draws_every)
        return int(min(self.draws_max, round(k)))

    def replace(self, **changes):
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return FitConfig(**kw)

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "lbfgs"}
        lb = self.lbfgs
        d["lbfgs"] = {"memory": lb.memory, "max_iter": lb.max_iter, "grad_tol": lb.grad_tol,
                      "box_lower": np.asarray(lb.box_lower).tolist(),
                      "box_upper": np.asarray(lb.box_upper).tolist()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown fit config keys {sorted(unknown)}")
        if "lbfgs" in d:
            lb = dict(d["lbfgs"])
            for k in ("box_lower", "box_upper"):
                if k in lb:
                    lb[k] = np.asarray(lb[k], dtype=float)
            d["lbfgs"] = LbfgsConfig(**lb)
        return cls(**d)


@dataclass
class FitResult:
    params: ModelParameters
    loglik_trace: list
    loglik_se: list
    converged: bool
    iterations_used: int
    seed: int
    diagnostics: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    config: FitConfig | None = None

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "named_params": self.params.named_values(),
            "loglik_trace": [float(v) for v in self.loglik_trace],
            "loglik_se": [float(v) for v in self.loglik_se],
            "converged": bool(self.converged),
            "iterations_used": int(self.iterations_used),
            "seed": int(self.seed),
            "diagnostics": self.diagnostics,
            "warnings": list(self.warnings),
            "config": None if self.config is None else self.config.to_dict(),
        }

    def to_json(self, path=None, **extra):
        doc = self.to_dict()
        doc.update(extra)
        text = json.dumps(doc, indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d):
        return cls(
            params=ModelParameters.from_dict(d["params"]),
            loglik_trace=list(d.get("loglik_trace", [])),
            loglik_se=list(d.get("loglik_se", [])),
            converged=bool(d.get("converged", False)),
            iterations_used=int(d.get("iterations_used", 0)),
            seed=int(d.get("seed", 0)),
            diagnostics=d.get("diagnostics", {}),
            warnings=list(d.get("warnings", [])),
            config=FitConfig.from_dict(d["config"]) if d.get("config") else None,
        )

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_dict(doc), doc


# ----------------------------------------------------------------------------
# initialization

def _lstsq(A, b):
    return np.linalg.lstsq(A, b, rcond=None)[0]


def _robust_var(v):
    v = np.asarray(v, dtype=float)
    if v.size < 2:
        return np.nan
    mad = np.median(np.abs(v - np.median(v)))
    return (1.4826 * mad) ** 2


def initialize_params(dataset, baseline_mode=False):
    """Crude moment/least-squares starting values."""
    p = dataset.packed
    ev = p.event
    if not ev.any() and baseline_mode:
        raise CpcureError("no observed events: the AFT model is not identifiable in baseline mode")
    n, p_long = p.x.shape
    # AFT
    sel = ev if ev.sum() > p.w.shape[1] else np.ones_like(ev)
    if p.w.shape[1]:
        gamma = _lstsq(p.w[sel], p.t[sel])
        resid = p.t[sel] - p.w[sel] @ gamma
    else:
        gamma = np.zeros(0)
        resid = p.t[sel] - 0.0
    tte_sd = float(np.sqrt(max(np.mean(resid ** 2), 1e-4)))

    # per-subject crude change points and piecewise fits
    omegas, coefs, rss, dfs, xs_rows = [], [], [], [], []
    cp_subj = np.flatnonzero(ev) if ev.sum() >= 3 else np.arange(n)
    for i in cp_subj:
        k = p.n_obs[i]
        s, y = p.s[i, :k], p.y[i, :k]
        j = int(np.argmin(y))
        om = s[j] if 0 < j < k - 1 else s[j]
        omegas.append(om)
        if k >= 4:
            d = s - om
            Z = np.column_stack([np.ones(k), np.where(d <= 0, d, 0), np.where(d > 0, d, 0)])
            c = _lstsq(Z, y)
            coefs.append(c)
            rss.append(np.sum((y - Z @ c) ** 2))
            dfs.append(k - 3)
            xs_rows.append(p.x[i])
    mu_w = float(np.median(omegas)) if omegas else float(np.median(p.s[p.mask]))
    mu_w = max(mu_w, 0.05)
    var_w = _robust_var(omegas)
    if coefs:
        coefs = np.array(coefs)
        X1 = np.column_stack([np.ones(len(coefs)), np.array(xs_rows).reshape(len(coefs), -1)])
        c0 = _lstsq(X1, coefs[:, 0])
        beta = c0[1:]
        mu_b = np.array([c0[0], np.median(coefs[:, 1]), np.median(coefs[:, 2])])
        var_b = np.array([_robust_var(coefs[:, 0] - X1 @ c0), _robust_var(coefs[:, 1]),
                          _robust_var(coefs[:, 2])])
        sigma_y = float(np.sqrt(np.sum(rss) / max(np.sum(dfs), 1)))
    else:
        X1 = np.column_stack([np.ones(p.mask.sum()), np.repeat(p.x, p.n_obs, axis=0)])
        c0 = _lstsq(X1, p.y[p.mask])
        beta = c0[1:]
        mu_b = np.array([c0[0], -0.1, 0.1])
        var_b = np.full(3, np.nan)
        sigma_y = float(np.std(p.y[p.mask] - X1 @ c0))
    var_r = np.concatenate([[var_w], var_b])
    fallback = np.array([max(mu_w, 0.1) ** 2, 0.01, 0.01, 0.01])
    var_r = np.where(np.isfinite(var_r) & (var_r > 1e-6), var_r, fallback)
    re_cov = np.diag(var_r)
    re_mean = np.concatenate([[mu_w], mu_b])

    # stable block from censored subjects' linear fits
    cens = np.flatnonzero(~ev)
    st_coefs, st_rss, st_df, st_x = [], [], [], []
    for i in cens:
        k = p.n_obs[i]
        if k >= 3:
            s, y = p.s[i, :k], p.y[i, :k]
            Z = np.column_stack([np.ones(k), s])
            c = _lstsq(Z, y)
            st_coefs.append(c)
            st_rss.append(np.sum((y - Z @ c) ** 2))
            st_df.append(k - 2)
            st_x.append(p.xs[i])
    p_s = p.xs.shape[1]
    if len(st_coefs) >= 3:
        st_coefs = np.array(st_coefs)
        X1 = np.column_stack([np.ones(len(st_coefs)), np.array(st_x).reshape(len(st_coefs), -1)])
        cs = _lstsq(X1, st_coefs[:, 0])
        beta_s = cs[1:]
        mu_rs = np.array([cs[0], np.median(st_coefs[:, 1])])
        var_s = np.array([_robust_var(st_coefs[:, 0] - X1 @ cs), _robust_var(st_coefs[:, 1])])
        sigma_ys = float(np.sqrt(np.sum(st_rss) / max(np.sum(st_df), 1)))
    else:
        beta_s = np.zeros(p_s)
        mu_rs = np.array([0.0, 0.0])
        var_s = np.full(2, np.nan)
        sigma_ys = sigma_y
    var_s = np.where(np.isfinite(var_s) & (var_s > 1e-6), var_s, 0.01)

    pi = 0.0 if baseline_mode else 0.5 * float(np.mean(~ev))
    return ModelParameters(
        stable_rate=pi,
        tte_coef=gamma,
        tte_sd=tte_sd,
        re_mean=re_mean,
        re_cov=re_cov,
        long_coef=beta,
        long_sd=max(sigma_y, 1e-3),
        stable_re_mean=mu_rs,
        stable_re_cov=np.diag(var_s),
        stable_long_coef=beta_s,
        stable_long_sd=max(sigma_ys, 1e-3),
    )


# ----------------------------------------------------------------------------
# iteration

def observed_loglik(dataset, params, K=1000, seed=0, with_stable=True):
    """Monte Carlo estimate of the observed-data log-likelihood and its SE."""
    st = run_estep(dataset, params, K=K, seed=seed, iteration=-1, with_stable=with_stable)
    bad = [sid for sid, v in zip(st.subject_ids, st.subject_loglik) if not np.isfinite(v)]
    if bad:
        logger.warning("non-finite log-likelihood for subjects %s", bad[:10])
    return st.loglik, st.loglik_se


def run_mstep(stats, dataset, params, config=None, baseline_mode=False):
    config = config or FitConfig()
    gamma, tte_sd = update_aft(stats, dataset)
    beta, long_sd = update_long_cp(stats, dataset)
    re_mean, re_cov = update_re_params(stats, params.re_mean, params.re_cov, config.lbfgs)
    if baseline_mode:
        pi = 0.0
        st = (params.stable_re_mean, params.stable_re_cov, params.stable_long_coef,
              params.stable_long_sd)
    else:
        pi = update_stable_rate(stats)
        st = update_stable_params(stats, dataset, params)
    return ModelParameters(
        stable_rate=pi, tte_coef=gamma, tte_sd=tte_sd, re_mean=re_mean, re_cov=re_cov,
        long_coef=beta, long_sd=long_sd, stable_re_mean=st[0], stable_re_cov=st[1],
        stable_long_coef=st[2], stable_long_sd=st[3],
    )


def _monitor_vector(params, baseline_mode):
    parts = [
        [params.stable_rate], params.tte_coef, [np.log(params.tte_sd)], params.re_mean,
        cov_to_pvech(params.re_cov), params.long_coef, [np.log(params.long_sd)],
    ]
    if not baseline_mode:
        L = np.linalg.cholesky(params.stable_re_cov)
        parts += [params.stable_re_mean, [np.log(L[0, 0]), L[1, 0], np.log(L[1, 1])],
                  params.stable_long_coef, [np.log(params.stable_long_sd)]]
    return np.concatenate([np.atleast_1d(np.asarray(v, dtype=float)) for v in parts])


def parameter_change(old, new, baseline_mode=False):
    """Max over coordinates of |change| / max(|old|, 1) on the unconstrained scale."""
    a = _monitor_vector(old, baseline_mode)
    b = _monitor_vector(new, baseline_mode)
    return float(np.max(np.abs(b - a) / np.maximum(np.abs(a), 1.0)))


def smoothed(trace, width=3):
    trace = np.asarray(trace, dtype=float)
    if trace.size < width:
        return trace.copy()
    return np.convolve(trace, np.ones(width) / width, mode="valid")


def smoothed_se(se, width=3):
    v = np.asarray(se, dtype=float) ** 2
    if v.size < width:
        return np.sqrt(v)
    return np.sqrt(np.convolve(v, np.ones(width), mode="valid")) / width


def ascent_pairs(trace, se, width=3, n_se=2.0):
    """Boolean per adjacent pair of the smoothed trace: non-decreasing up to
    ``n_se`` Monte Carlo standard errors of the difference."""
    m = smoothed(trace, width)
    s = smoothed_se(se, width)
    diff = np.diff(m)
    tol = n_se * np.sqrt(s[1:] ** 2 + s[:-1] ** 2)
    return diff >= -tol


def _check_rank(dataset):
    p = dataset.packed
    for name, X in (("long", p.x), ("stable", p.xs)):
        if X.shape[1] and np.any(np.ptp(X, axis=0) == 0):
            msg = (f"{name} covariates contain a constant column, which is collinear with the "
                   "random intercept")
            logger.warning(msg)
            warnings.warn(msg, UserWarning, stacklevel=3)


def fit(dataset, config=None, init=None, callback=None):
    """Fit the joint model by MCEM.  Non-convergence is reported, not raised.

    ``callback(iteration, stats)`` is called after every E-step (used for
    the per-iteration diagnostic stream).
    """
    config = config or FitConfig()
    baseline = config.baseline_mode
    caught = []
    with warnings.catch_warnings(record=True) as wlist:
        warnings.simplefilter("always")
        _check_rank(dataset)
        params = init if init is not None else initialize_params(dataset, baseline)
        if baseline and params.stable_rate != 0:
            params = params.replace(stable_rate=0.0)
        trace, ses, changes, ess_min = [], [], [], []
        converged = False
        it = 0
        for it in range(config.max_em_iter):
            K = config.draws(it)
            try:
                stats = run_estep(dataset, params, K=K, seed=config.seed, iteration=it,
                                  with_stable=not baseline)
                new = run_mstep(stats, dataset, params, config, baseline)
            except CpcureError as exc:
                raise type(exc)(f"EM iteration {it}: {exc}") from exc
            if callback is not None:
                callback(it, stats)
            trace.append(stats.loglik)
            ses.append(stats.loglik_se)
            ess_min.append(float(stats.ess.min()))
            changes.append(parameter_change(params, new, baseline))
            params = new
            if it + 1 >= max(config.min_iter, config.window):
                small = max(changes[-config.window:]) < config.rel_tol
                ok = bool(ascent_pairs(trace[-4:], ses[-4:])[-1]) if len(trace) >= 4 else True
                if small and ok:
                    converged = True
                    break
        caught = [str(w.message) for w in wlist]
    uniq = list(dict.fromkeys(caught))
    return FitResult(
        params=params,
        loglik_trace=trace,
        loglik_se=ses,
        converged=converged,
        iterations_used=len(trace),
        seed=config.seed,
        diagnostics={"ess_min": ess_min, "param_change": changes,
                     "draws_last": config.draws(it)},
        warnings=uniq,
        config=config,
    )
