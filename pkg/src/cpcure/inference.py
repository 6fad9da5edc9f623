"""Percentile bootstrap, marginal mean trajectories and treatment-effect curves."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .data import ModelParameters, StudyDataset
from .distributions import ptmvn_draw
from .exceptions import BootstrapError, CpcureError, ValidationError
from .mcem import FitConfig, fit

logger = logging.getLogger(__name__)

DEFAULT_TRAJECTORY_DRAWS = 100_000
DEFAULT_GRID = np.round(np.arange(1, 21) * 0.1, 10)
FAILURE_WARN_FRACTION = 0.2
BOOT_MAX_ITER = 15


def percentile_bounds(values, level=0.95):
    """Lower/upper percentile bounds along axis 0 as order statistics.

    Uses the inverted-CDF rule, so every bound is one of the replicate
    values (for two replicates the bounds are their min and max).
    """
    values = np.asarray(values, dtype=float)
    alpha = 100.0 * (1.0 - level) / 2.0
    lo = np.percentile(values, alpha, axis=0, method="inverted_cdf")
    hi = np.percentile(values, 100.0 - alpha, axis=0, method="inverted_cdf")
    return lo, hi


def default_threads():
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)


def _map(func, jobs, threads):
    """Ordered map, optionally over a process pool.  Results are collected
    by job index, so the output never depends on ``threads``."""
    if threads is None:
        threads = default_threads()
    if threads <= 1 or len(jobs) <= 1:
        return [func(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return list(pool.map(func, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def _child_seeds(seed, count):
    """One 64-bit seed per replicate, independent of how work is scheduled."""
    ss = np.random.SeedSequence(int(seed))
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(count)]


# ----------------------------------------------------------------------------
# bootstrap

def bootstrap_config(config: FitConfig | None = None, **overrides):
    """Lighter schedule for warm-started replicate fits.

    Replicates start at the point estimate, so they skip the long approach
    phase of a cold fit; fewer draws per iteration and an iteration cap
    keep a B=100 bootstrap affordable on one core.  The cap leaves the
    slowest directions (slope means, tied to the small slope variances)
    short of the replicate optimum, which narrows their intervals somewhat.
    """
    config = config or FitConfig()
    kw = dict(draws_initial=100, min_iter=3, max_em_iter=min(config.max_em_iter, BOOT_MAX_ITER),
              rel_tol=max(config.rel_tol, 5e-3))
    kw.update(overrides)
    return config.replace(**kw)


@dataclass
class BootstrapResult:
    """Replicate fits and percentile intervals keyed like
    :meth:`ModelParameters.named_values`."""

    replicates: list  # ModelParameters or None (fit raised)
    converged: np.ndarray
    ci_lower: dict
    ci_upper: dict
    failures: int
    seeds: list
    warnings: list = field(default_factory=list)

    @property
    def B(self):
        return len(self.replicates)

    def matrix(self, only_converged=False):
        """(replicates x parameters) array of named values of the replicate
        fits that ran to completion (optionally only the converged ones)."""
        rows = [p.vector() for p, ok in zip(self.replicates, self.converged)
                if p is not None and (ok or not only_converged)]
        return np.array(rows)

    @property
    def names(self):
        return list(self.ci_lower)

    def standard_errors(self):
        m = self.matrix()
        sd = m.std(axis=0, ddof=1) if m.shape[0] > 1 else np.full(len(self.names), np.nan)
        return dict(zip(self.names, sd.tolist()))

    def to_dict(self):
        return {
            "B": self.B,
            "failures": int(self.failures),
            "converged": [bool(c) for c in self.converged],
            "seeds": [int(s) for s in self.seeds],
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "se": self.standard_errors(),
            "replicates": [None if p is None else p.named_values() for p in self.replicates],
            "replicate_params": [None if p is None else p.to_dict() for p in self.replicates],
            "warnings": list(self.warnings),
        }


class _ReplicateJob(NamedTuple):
    dataset: StudyDataset
    config: FitConfig
    init: ModelParameters | None
    seed: int


def resample(dataset, rng):
    """Draw n subjects with replacement; duplicates get distinct ids."""
    idx = rng.integers(0, dataset.n, size=dataset.n)
    return dataset.subset(idx, relabel=True)


def _fit_replicate(job: _ReplicateJob):
    rng = np.random.default_rng(job.seed)
    data = resample(job.dataset, rng)
    cfg = job.config.replace(seed=int(rng.integers(0, 2**63 - 1)))
    try:
        res = fit(data, cfg, init=job.init)
    except (CpcureError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        return None, False, f"{type(exc).__name__}: {exc}"
    return res.params, res.converged, None


def bootstrap(dataset, config=None, B=100, seed=0, init=None, threads=1):
    """Percentile bootstrap over subjects.

    Each replicate resamples ``dataset.n`` subjects with replacement and
    refits with ``config``; ``init`` (typically the point estimate) warm
    starts every replicate.  Replicates whose fit raised are counted as
    failures and left out of the intervals; replicates that stopped at the
    iteration cap are kept (``converged`` records which ones).
    """
    if B < 2:
        raise ValidationError("bootstrap needs B >= 2")
    config = config or FitConfig()
    seeds = _child_seeds(seed, B)
    jobs = [_ReplicateJob(dataset, config, init, s) for s in seeds]
    out = _map(_fit_replicate, jobs, threads)
    reps = [o[0] for o in out]
    conv = np.array([o[1] for o in out], dtype=bool)
    notes = [f"replicate {k}: {o[2]}" for k, o in enumerate(out) if o[2]]
    good = [p for p in reps if p is not None]
    failures = B - len(good)
    if not good:
        raise BootstrapError(f"all {B} bootstrap replicates failed" +
                             (f"; first error: {notes[0]}" if notes else ""))
    if failures > FAILURE_WARN_FRACTION * B:
        notes.append(f"{failures} of {B} bootstrap replicates failed")
        logger.warning(notes[-1])
    logger.info("%d of %d bootstrap replicates stopped at the iteration cap", int(np.sum(~conv)) - failures, B)
    names = good[0].names
    lo, hi = percentile_bounds(np.array([p.vector() for p in good]))
    return BootstrapResult(reps, conv, dict(zip(names, lo.tolist())), dict(zip(names, hi.tolist())),
                           failures, seeds, notes)


# ----------------------------------------------------------------------------
# trajectories

class DesignMeans(NamedTuple):
    x: np.ndarray
    xs: np.ndarray
    w: np.ndarray

    @classmethod
    def of(cls, dataset):
        return cls(*dataset.design_means())

    def to_dict(self):
        return {k: np.asarray(v, dtype=float).tolist() for k, v in self._asdict().items()}


@dataclass
class TrajectoryEstimate:
    grid: np.ndarray
    mean: np.ndarray
    stable: np.ndarray  # stable-group mean per grid point
    changepoint: np.ndarray  # change-point-group mean per grid point
    stable_rate: float
    mc_se: np.ndarray
    ci_lower: np.ndarray | None = None
    ci_upper: np.ndarray | None = None
    replicates: np.ndarray | None = None  # (R, G) bootstrap curves

    def with_bands(self, curves, level=0.95):
        curves = np.asarray(curves, dtype=float)
        lo, hi = percentile_bounds(curves, level)
        return TrajectoryEstimate(self.grid, self.mean, self.stable, self.changepoint,
                                  self.stable_rate, self.mc_se, lo, hi, curves)


def _cp_curve(grid, omega, b):
    d = grid[None, :] - omega[:, None]
    return b[:, :1] + np.where(d <= 0, b[:, 1:2] * d, b[:, 2:3] * d)


def marginal_trajectory(params: ModelParameters, design_means, grid, J=DEFAULT_TRAJECTORY_DRAWS, rng=None,
                        chunk=20_000):
    """Population mean outcome ``pi * mu_s(s) + (1 - pi) * mu_cp(s)`` on ``grid``.

    The change-point mean averages the piecewise curve over J joint draws
    of (t, omega, b) with ``t ~ N(w_bar' gamma, sigma_tte^2)`` and
    (omega, b) from the truncated law on (0, e^t); one set of draws is
    shared by every grid point.  The stable mean is closed form.
    """
    if J < 1:
        raise ValidationError("J must be at least 1")
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if grid.size == 0:
        raise ValidationError("trajectory grid is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    dm = design_means if isinstance(design_means, DesignMeans) else DesignMeans(*design_means)
    loc = float(np.asarray(dm.w, dtype=float) @ params.tte_coef)
    total = np.zeros(grid.size)
    total_sq = np.zeros(grid.size)
    done = 0
    while done < J:
        k = min(chunk, J - done)
        t = loc + params.tte_sd * rng.standard_normal(k)
        r = ptmvn_draw(params.re_mean, params.re_cov, 0.0, np.exp(t), rng.random(k),
                       rng.standard_normal((k, 3)))
        c = _cp_curve(grid, r[:, 0], r[:, 1:])
        total += c.sum(0)
        total_sq += (c * c).sum(0)
        done += k
    mc = total / J
    var = np.maximum(total_sq / J - mc * mc, 0.0) * J / max(J - 1, 1)
    mu_cp = float(np.asarray(dm.x, dtype=float) @ params.long_coef) + mc
    mu_s = (float(np.asarray(dm.xs, dtype=float) @ params.stable_long_coef)
            + params.stable_re_mean[0] + params.stable_re_mean[1] * grid)
    pi = params.stable_rate
    mean = pi * mu_s + (1.0 - pi) * mu_cp
    se = (1.0 - pi) * np.sqrt(var / J)
    return TrajectoryEstimate(grid, mean, mu_s, mu_cp, pi, se)


@dataclass
class TreatmentEffect:
    grid: np.ndarray
    ate: np.ndarray
    ci_lower: np.ndarray | None = None
    ci_upper: np.ndarray | None = None


def average_treatment_effect(traj_treat: TrajectoryEstimate, traj_control: TrajectoryEstimate):
    """Pointwise difference treat - control, with a percentile band when
    both estimates carry paired bootstrap curves."""
    if traj_treat.grid.shape != traj_control.grid.shape or not np.allclose(
            traj_treat.grid, traj_control.grid, rtol=0, atol=1e-12):
        raise ValidationError("trajectory grids do not align")
    ate = traj_treat.mean - traj_control.mean
    lo = hi = None
    rt, rc = traj_treat.replicates, traj_control.replicates
    if rt is not None and rc is not None:
        m = min(len(rt), len(rc))
        lo, hi = percentile_bounds(np.asarray(rt[:m]) - np.asarray(rc[:m]))
    return TreatmentEffect(traj_treat.grid.copy(), ate, lo, hi)


def landmarks(traj_a: TrajectoryEstimate, traj_b: TrajectoryEstimate, effect: TreatmentEffect | None = None):
    """First grid times where the two arm bands stop overlapping and where
    the treatment-effect band lies entirely below / away from zero."""
    def first(mask):
        idx = np.flatnonzero(mask)
        return float(traj_a.grid[idx[0]]) if idx.size else None

    out = {"band_separation": None, "ate_upper_below_zero": None, "ate_excludes_zero": None}
    if traj_a.ci_lower is not None and traj_b.ci_lower is not None:
        apart = (traj_a.ci_lower > traj_b.ci_upper) | (traj_b.ci_lower > traj_a.ci_upper)
        out["band_separation"] = first(apart)
    if effect is not None and effect.ci_upper is not None:
        out["ate_upper_below_zero"] = first(effect.ci_upper < 0)
        out["ate_excludes_zero"] = first((effect.ci_upper < 0) | (effect.ci_lower > 0))
    return out


class _ArmJob(NamedTuple):
    dataset: StudyDataset
    config: FitConfig
    init: ModelParameters | None
    seed: int
    grid: np.ndarray
    J: int


def _arm_replicate(job: _ArmJob):
    params, _, err = _fit_replicate(_ReplicateJob(job.dataset, job.config, job.init, job.seed))
    if params is None:
        return None, err
    rng = np.random.default_rng([job.seed, 1])
    traj = marginal_trajectory(params, DesignMeans.of(job.dataset), job.grid, job.J, rng)
    return traj.mean, None


@dataclass
class TrajectoryReport:
    arms: dict  # name -> TrajectoryEstimate
    fits: dict  # name -> FitResult
    effect: TreatmentEffect | None
    landmarks: dict
    failures: dict
    warnings: list = field(default_factory=list)

    def landmark_json(self, days_per_year=None):
        doc = {"landmarks_years": self.landmarks, "failures": self.failures,
               "arms": list(self.arms)}
        if days_per_year:
            doc["landmarks_days"] = {k: (None if v is None else v * days_per_year)
                                     for k, v in self.landmarks.items()}
        return json.dumps(doc, indent=2, sort_keys=True)


def trajectory_ci(datasets_by_arm, config=None, B=100, grid=DEFAULT_GRID, J=DEFAULT_TRAJECTORY_DRAWS,
                  seed=0, threads=1, J_boot=None, fits=None):
    """Per-arm trajectories with bootstrap bands, plus the treatment effect
    (first arm minus second) and the landmark times.

    Each arm is resampled within itself; replicate b of both arms is paired
    for the effect band.  ``fits`` may supply point fits per arm (their
    parameters also warm start that arm's replicates).
    """
    if B < 2:
        raise ValidationError("trajectory bands need B >= 2")
    config = config or FitConfig()
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    J_boot = J_boot or max(2000, J // 10)
    names = list(datasets_by_arm)
    if not 1 <= len(names) <= 2:
        raise ValidationError("trajectory_ci takes one or two arms")
    seeds = _child_seeds(seed, len(names))
    arms, fitted, failures, notes = {}, {}, {}, []
    curves_by_arm = {}
    for name, s in zip(names, seeds):
        ds = datasets_by_arm[name]
        res = (fits or {}).get(name) or fit(ds, config.replace(seed=s))
        fitted[name] = res
        point = marginal_trajectory(res.params, DesignMeans.of(ds), grid, J, np.random.default_rng([s, 0]))
        jobs = [_ArmJob(ds, config, res.params, c, grid, J_boot) for c in _child_seeds(s, B)]
        out = _map(_arm_replicate, jobs, threads)
        curves_by_arm[name] = [o[0] for o in out]
        failures[name] = int(sum(o[0] is None for o in out))
        notes += [f"{name} replicate {k}: {o[1]}" for k, o in enumerate(out) if o[1]]
        good = [c for c in curves_by_arm[name] if c is not None]
        if not good:
            raise BootstrapError(f"all {B} bootstrap replicates failed for arm {name}")
        if failures[name] > FAILURE_WARN_FRACTION * B:
            notes.append(f"{failures[name]} of {B} replicates failed for arm {name}")
        arms[name] = point.with_bands(good)
    effect = None
    marks = {"band_separation": None, "ate_upper_below_zero": None, "ate_excludes_zero": None}
    if len(names) == 2:
        a, c = names
        paired = [(x, y) for x, y in zip(curves_by_arm[a], curves_by_arm[c])
                  if x is not None and y is not None]
        effect = average_treatment_effect(arms[a], arms[c])
        if paired:
            lo, hi = percentile_bounds(np.array([x - y for x, y in paired]))
            effect = TreatmentEffect(effect.grid, effect.ate, lo, hi)
        marks = landmarks(arms[a], arms[c], effect)
    return TrajectoryReport(arms, fitted, effect, marks, failures, notes)


def parse_grid(text):
    """``start,stop,step`` (inclusive stop) to an array of grid times."""
    try:
        start, stop, step = (float(v) for v in str(text).split(","))
    except ValueError:
        raise ValidationError(f"grid must be 'start,stop,step', got {text!r}") from None
    if not (step > 0 and stop >= start):
        raise ValidationError(f"invalid grid {text!r}: need step > 0 and stop >= start")
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(n), 12)
