"""Synthetic data generator and the bias / MSE / coverage benchmark harness."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import GroupLabel, ModelParameters, StudyDataset, SubjectData
from .distributions import ptmvn_draw
from .exceptions import CpcureError
from .inference import (
    DEFAULT_GRID,
    DesignMeans,
    _child_seeds,
    _map,
    bootstrap,
    bootstrap_config,
    marginal_trajectory,
    percentile_bounds,
)
from .mcem import FitConfig, fit

logger = logging.getLogger(__name__)

VISIT_SPACING = 0.1
VISIT_NOISE_SD = 0.02
MAX_VISITS = 30

RE_MEAN_LARGE = (0.5, 0.0, -0.5, 0.5)
RE_MEAN_SMALL = (0.3, 0.0, -0.3, 0.3)


def default_truth(stable_rate=0.2, re_mean=RE_MEAN_LARGE):
    """Truth used by the benchmark.  Only ``re_mean`` and ``stable_rate``
    follow published scenario values; the remaining blocks are package
    defaults chosen to give tumour-burden-like trajectories."""
    re_cov = np.array([
        [0.0400, 0.0000, 0.0040, -0.0040],
        [0.0000, 0.0100, 0.0000, 0.0000],
        [0.0040, 0.0000, 0.0100, 0.0000],
        [-0.0040, 0.0000, 0.0000, 0.0100],
    ])
    return ModelParameters(
        stable_rate=stable_rate,
        tte_coef=[0.3],
        tte_sd=0.6,
        re_mean=re_mean,
        re_cov=re_cov,
        long_coef=[0.05],
        long_sd=0.05,
        stable_re_mean=[0.0, -0.3],
        stable_re_cov=[[0.01, 0.0], [0.0, 0.01]],
        stable_long_coef=[0.05],
        stable_long_sd=0.05,
    )


@dataclass(frozen=True)
class SimConfig:
    n: int = 200
    truth: ModelParameters = field(default_factory=default_truth)
    censor_rate: float = 0.5
    visit_spacing: float = VISIT_SPACING
    visit_noise_sd: float = VISIT_NOISE_SD
    max_visits: int = MAX_VISITS
    replications: int = 50
    seed: int = 0

    @classmethod
    def scenario(cls, n=200, stable_rate=0.2, re_mean=RE_MEAN_LARGE, **kw):
        return cls(n=n, truth=default_truth(stable_rate, re_mean), **kw)

    @property
    def stable_rate_true(self):
        return self.truth.stable_rate

    @property
    def re_mean_true(self):
        return self.truth.re_mean

    def to_dict(self):
        return {
            "n": self.n, "truth": self.truth.to_dict(), "censor_rate": self.censor_rate,
            "visit_spacing": self.visit_spacing, "visit_noise_sd": self.visit_noise_sd,
            "max_visits": self.max_visits, "replications": self.replications, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "truth" in d:
            d["truth"] = ModelParameters.from_dict(d["truth"])
        return cls(**d)


class SimulatedData(NamedTuple):
    dataset: StudyDataset
    labels: list  # GroupLabel per subject (truth)
    random_effects: np.ndarray  # (n, 4): (omega, b0, b1, b2) or (nan, b_s0, b_s1, nan)
    log_event_times: np.ndarray  # latent t*, +inf for stable subjects
    regenerated: int


def visit_times(rng, size, spacing=VISIT_SPACING, noise_sd=VISIT_NOISE_SD):
    """``|spacing * j - z|`` with ``z`` half-normal, for j = 1..size."""
    j = np.arange(1, size + 1)
    z = np.abs(rng.normal(0.0, noise_sd, size=size))
    return np.abs(spacing * j - z)


def generate_dataset(config: SimConfig, rng, id_prefix="s") -> SimulatedData:
    """Draw one dataset from the generative model at ``config.truth``."""
    th = config.truth
    subjects, labels, effects, tstars = [], [], [], []
    regenerated = 0
    i = 0
    while len(subjects) < config.n:
        w = rng.standard_normal(th.tte_coef.size)
        x = rng.standard_normal(th.long_coef.size)
        xs = x[: th.stable_long_coef.size] if th.stable_long_coef.size == x.size else \
            rng.standard_normal(th.stable_long_coef.size)
        tstar = w @ th.tte_coef + th.tte_sd * rng.standard_normal()
        stable = rng.random() < th.stable_rate
        if stable:
            tstar = np.inf
        censor = rng.exponential(1.0 / config.censor_rate) if config.censor_rate > 0 else np.inf
        t_event = min(np.exp(tstar), censor)
        event = np.exp(tstar) <= censor
        s_star = visit_times(rng, config.max_visits, config.visit_spacing, config.visit_noise_sd)
        if stable:
            b = rng.multivariate_normal(th.stable_re_mean, th.stable_re_cov)
            r = np.array([np.nan, b[0], b[1], np.nan])
        else:
            u = rng.random()
            eps = rng.standard_normal(3)
            r = ptmvn_draw(th.re_mean, th.re_cov, 0.0, np.exp(tstar), u, eps)
        if not np.isfinite(t_event):
            raise CpcureError("stable subject with no censoring: set censor_rate > 0")
        keep = s_star <= t_event
        if keep.any():
            n_i = int(np.max(np.flatnonzero(keep))) + 1
            s = s_star[:n_i]
        else:
            s = np.array([0.1 * s_star[0]])
        if s[-1] > t_event or np.any(np.diff(s) <= 0):
            regenerated += 1
            continue
        noise = rng.standard_normal(s.size)
        if stable:
            mean = xs @ th.stable_long_coef + r[1] + r[2] * s
            y = mean + th.stable_long_sd * noise
        else:
            d = s - r[0]
            mean = x @ th.long_coef + r[1] + np.where(d <= 0, r[2] * d, r[3] * d)
            y = mean + th.long_sd * noise
        subjects.append(SubjectData(f"{id_prefix}{i}", s, y, t_event, event, x, xs, w))
        labels.append(GroupLabel.STABLE if stable else GroupLabel.CHANGE_POINT)
        effects.append(r)
        tstars.append(tstar)
        i += 1
    if regenerated:
        logger.debug("regenerated %d subject(s) violating the visit/event contract", regenerated)
    return SimulatedData(StudyDataset(tuple(subjects)), labels, np.array(effects),
                         np.array(tstars), regenerated)


def generative_trajectory(params, grid, n_subjects, rng, x_mean=None, xs_mean=None, w=None,
                          sample_covariates=True):
    """Brute-force mean of the latent outcome process over ``n_subjects``
    simulated subjects at each grid time.

    With ``sample_covariates`` the AFT and longitudinal covariates are drawn
    from N(0, 1) as in the generator; otherwise they are held at ``w`` /
    ``x_mean`` / ``xs_mean``.  Returns ``(mean, se)`` per grid point.
    """
    grid = np.asarray(grid, dtype=float)
    p_w, p_x, p_s = params.tte_coef.size, params.long_coef.size, params.stable_long_coef.size
    if sample_covariates:
        W = rng.standard_normal((n_subjects, p_w))
        X = rng.standard_normal((n_subjects, p_x))
        XS = X if p_s == p_x else rng.standard_normal((n_subjects, p_s))
    else:
        W = np.broadcast_to(np.zeros(p_w) if w is None else w, (n_subjects, p_w))
        X = np.broadcast_to(np.zeros(p_x) if x_mean is None else x_mean, (n_subjects, p_x))
        XS = np.broadcast_to(np.zeros(p_s) if xs_mean is None else xs_mean, (n_subjects, p_s))
    tstar = W @ params.tte_coef + params.tte_sd * rng.standard_normal(n_subjects)
    stable = rng.random(n_subjects) < params.stable_rate
    r = ptmvn_draw(params.re_mean, params.re_cov, 0.0, np.exp(tstar), rng.random(n_subjects),
                   rng.standard_normal((n_subjects, 3)))
    bs = rng.multivariate_normal(params.stable_re_mean, params.stable_re_cov, size=n_subjects)
    d = grid[None, :] - r[:, :1]
    cp = (X @ params.long_coef)[:, None] + r[:, 1:2] + np.where(d <= 0, r[:, 2:3] * d, r[:, 3:4] * d)
    st = (XS @ params.stable_long_coef)[:, None] + bs[:, :1] + bs[:, 1:2] * grid[None, :]
    y = np.where(stable[:, None], st, cp)
    y = y + np.where(stable[:, None], params.stable_long_sd, params.long_sd) * \
        rng.standard_normal(y.shape)
    return y.mean(axis=0), y.std(axis=0, ddof=1) / np.sqrt(n_subjects)


# ----------------------------------------------------------------------------
# metrics

@dataclass
class SimMetrics:
    names: list
    bias: np.ndarray
    mse: np.ndarray
    coverage: np.ndarray
    count: int

    def rows(self, scenario=""):
        return [
            {"parameter": n, "scenario": scenario, "bias": float(b), "mse": float(m),
             "cover": float(c) if np.isfinite(c) else float("nan")}
            for n, b, m, c in zip(self.names, self.bias, self.mse, self.coverage)
        ]


def compute_metrics(estimates, truths, lower=None, upper=None, names=None):
    """Bias = |mean(est - truth)|, MSE = mean((est - truth)^2), and the
    fraction of intervals containing the truth, per column."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    if est.size == 0 or est.shape[0] == 0:
        raise CpcureError("compute_metrics needs at least one estimate")
    truth = np.broadcast_to(np.asarray(truths, dtype=float), est.shape)
    err = est - truth
    bias = np.abs(err.mean(axis=0))
    mse = np.mean(err ** 2, axis=0)
    if lower is not None and upper is not None:
        lo = np.atleast_2d(np.asarray(lower, dtype=float))
        hi = np.atleast_2d(np.asarray(upper, dtype=float))
        if lo.shape != est.shape or hi.shape != est.shape:
            raise CpcureError("interval arrays must match the estimate array")
        have = np.isfinite(lo) & np.isfinite(hi)
        hits = ((lo <= truth) & (truth <= hi) & have).sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            cover = np.where(have.any(axis=0), hits / have.sum(axis=0), np.nan)
    else:
        cover = np.full(est.shape[1], np.nan)
    names = list(names) if names is not None else [str(k) for k in range(est.shape[1])]
    return SimMetrics(names, bias, mse, cover, est.shape[0])


# ----------------------------------------------------------------------------
# benchmark

CHANGE_POINT_PREFIXES = ("tte_", "re_", "long_")


class _RepJob(NamedTuple):
    config: SimConfig
    fit_config: object
    boot_config: object
    include_baseline: bool
    B: int
    grid: np.ndarray
    J: int
    seed: int
    index: int


@dataclass
class ReplicationOutcome:
    index: int
    estimates: dict  # model -> named-value vector
    lower: dict
    upper: dict
    converged: dict
    trajectory: dict  # model -> (mean, lo, hi)
    error: str | None = None


def _fit_with_ci(data, fit_config, boot_config, B, seed, grid, J):
    res = fit(data, fit_config.replace(seed=seed))
    est = res.params.vector()
    dm = DesignMeans.of(data)
    traj = marginal_trajectory(res.params, dm, grid, J, np.random.default_rng([seed, 7]))
    lo = hi = np.full(est.size, np.nan)
    tlo = thi = np.full(grid.size, np.nan)
    if B >= 2:
        boot = bootstrap(data, boot_config.replace(baseline_mode=fit_config.baseline_mode), B,
                         seed=seed + 1, init=res.params, threads=1)
        lo = np.array(list(boot.ci_lower.values()))
        hi = np.array(list(boot.ci_upper.values()))
        curves = [marginal_trajectory(p, dm, grid, max(J // 10, 1000), np.random.default_rng([seed, 8, k])).mean
                  for k, p in enumerate(boot.replicates) if p is not None]
        tlo, thi = percentile_bounds(np.array(curves))
    return est, lo, hi, res.converged, (traj.mean, tlo, thi)


def _run_replication(job: _RepJob):
    rng = np.random.default_rng(job.seed)
    out = ReplicationOutcome(job.index, {}, {}, {}, {}, {})
    try:
        sim = generate_dataset(job.config, rng, id_prefix=f"r{job.index}s")
        models = [("full", job.fit_config.replace(baseline_mode=False))]
        if job.include_baseline:
            models.append(("baseline", job.fit_config.replace(baseline_mode=True)))
        for k, (name, fc) in enumerate(models):
            fit_seed = int(rng.integers(0, 2**62))
            est, lo, hi, conv, traj = _fit_with_ci(sim.dataset, fc, job.boot_config, job.B, fit_seed,
                                                   job.grid, job.J)
            out.estimates[name], out.lower[name], out.upper[name] = est, lo, hi
            out.converged[name] = conv
            out.trajectory[name] = traj
    except Exception as exc:  # noqa: BLE001 - one bad replication must not stop the study
        out.error = f"{type(exc).__name__}: {exc}"
    return out


@dataclass
class BenchmarkResult:
    scenario: str
    truth: ModelParameters
    grid: np.ndarray
    true_trajectory: np.ndarray
    metrics: dict  # model -> SimMetrics over parameters
    trajectory_metrics: dict  # model -> SimMetrics over grid points
    outcomes: list
    failures: int
    nonconverged: dict

    def parameter_rows(self):
        rows = []
        for model, m in self.metrics.items():
            for r in m.rows(self.scenario):
                rows.append({"model": model, **r})
        return rows

    def trajectory_rows(self):
        rows = []
        for model, m in self.trajectory_metrics.items():
            for (name, b, e, c), t in zip(zip(m.names, m.bias, m.mse, m.coverage), self.true_trajectory):
                rows.append({"time": float(name), "scenario": self.scenario, "model": model, "truth": float(t),
                             "bias": float(b), "mse": float(e), "cover": float(c)})
        return rows


def scenario_label(config: SimConfig):
    mu = ",".join(f"{v:g}" for v in config.truth.re_mean)
    return f"n={config.n};pi={config.truth.stable_rate:g};mu_r=({mu})"


def run_benchmark(config: SimConfig, fit_config=None, include_baseline=True, B=100, boot_config=None,
                  grid=None, J=20_000, truth_subjects=100_000, threads=1):
    """Replicated generate / fit / bootstrap study.

    Parameter metrics compare every named parameter with the truth;
    baseline rows are restricted to change-point-group parameters.
    Trajectory truth is a brute-force generative average at the truth with
    covariates held at their population mean (the estimand of the
    trajectory estimator).
    """
    fit_config = fit_config or FitConfig()
    boot_config = boot_config or bootstrap_config(fit_config)
    grid = DEFAULT_GRID if grid is None else np.asarray(grid, dtype=float)
    seeds = _child_seeds(config.seed, config.replications + 1)
    jobs = [_RepJob(config, fit_config, boot_config, include_baseline, B, grid, J, s, k)
            for k, s in enumerate(seeds[:-1])]
    outcomes = _map(_run_replication, jobs, threads)
    truth_mean, _ = generative_trajectory(config.truth, grid, truth_subjects, np.random.default_rng(seeds[-1]),
                                          sample_covariates=False)
    ok = [o for o in outcomes if o.error is None]
    failures = len(outcomes) - len(ok)
    for o in outcomes:
        if o.error:
            logger.warning("replication %d failed: %s", o.index, o.error)
    if not ok:
        raise CpcureError("every benchmark replication failed")
    names = config.truth.names
    truth_vec = config.truth.vector()
    models = ["full"] + (["baseline"] if include_baseline else [])
    metrics, tmetrics, noncon = {}, {}, {}
    for model in models:
        keep = np.array([True] * len(names))
        if model == "baseline":
            keep = np.array([n.startswith(CHANGE_POINT_PREFIXES) for n in names])
        est = np.array([o.estimates[model] for o in ok])[:, keep]
        lo = np.array([o.lower[model] for o in ok])[:, keep]
        hi = np.array([o.upper[model] for o in ok])[:, keep]
        metrics[model] = compute_metrics(est, truth_vec[keep], lo, hi, [n for n, k in zip(names, keep) if k])
        tr = np.array([o.trajectory[model][0] for o in ok])
        tlo = np.array([o.trajectory[model][1] for o in ok])
        thi = np.array([o.trajectory[model][2] for o in ok])
        tmetrics[model] = compute_metrics(tr, truth_mean, tlo, thi, [f"{g:g}" for g in grid])
        noncon[model] = int(sum(not o.converged[model] for o in ok))
    return BenchmarkResult(scenario_label(config), config.truth, grid, truth_mean, metrics, tmetrics,
                           outcomes, failures, noncon)
