"""Study data and parameter containers, CSV ingestion and serialization."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd

from .exceptions import DomainError, LinkageError, ParseError, ValidationError

DAYS_PER_YEAR = 365.25


class LongitudinalRecord(NamedTuple):
    subject_id: str
    visit_time: float
    outcome: float


class GroupLabel(Enum):
    CHANGE_POINT = 0
    STABLE = 1
    UNKNOWN = None


def _as_vector(values, name, subject_id):
    arr = np.atleast_1d(np.asarray(values, dtype=float)).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"subject {subject_id}: non-finite entry in {name}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SubjectData:
    """One subject: visit times (years), outcomes, observed event time and
    indicator, and baseline covariates for the three submodels."""

    subject_id: str
    visit_times: np.ndarray
    outcomes: np.ndarray
    event_time: float
    event: bool
    long_covariates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    stable_covariates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    tte_covariates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        sid = str(self.subject_id)
        object.__setattr__(self, "subject_id", sid)
        s = _as_vector(self.visit_times, "visit_times", sid)
        y = _as_vector(self.outcomes, "outcomes", sid)
        if s.size == 0:
            raise ValidationError(f"subject {sid}: needs at least one visit")
        if s.size != y.size:
            raise ValidationError(f"subject {sid}: {s.size} visit times but {y.size} outcomes")
        if np.any(s < 0):
            raise ValidationError(f"subject {sid}: negative visit time")
        if np.any(np.diff(s) <= 0):
            raise ValidationError(f"subject {sid}: visit times must be strictly increasing")
        et = float(self.event_time)
        if not (math.isfinite(et) and et > 0):
            raise ValidationError(f"subject {sid}: event time must be positive and finite, got {et}")
        if s[-1] > et:
            raise ValidationError(
                f"subject {sid}: visit at {s[-1]:g} occurs after the event time {et:g}"
            )
        object.__setattr__(self, "visit_times", s)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "event_time", et)
        object.__setattr__(self, "event", bool(self.event))
        for name in ("long_covariates", "stable_covariates", "tte_covariates"):
            object.__setattr__(self, name, _as_vector(getattr(self, name), name, sid))

    @property
    def n_obs(self):
        return self.visit_times.size

    @property
    def records(self):
        return [
            LongitudinalRecord(self.subject_id, float(s), float(y))
            for s, y in zip(self.visit_times, self.outcomes)
        ]

    @property
    def label(self):
        return GroupLabel.CHANGE_POINT if self.event else GroupLabel.UNKNOWN

    @property
    def log_event_time(self):
        return log_event_time(self)

    def with_id(self, subject_id):
        return SubjectData(
            subject_id,
            self.visit_times,
            self.outcomes,
            self.event_time,
            self.event,
            self.long_covariates,
            self.stable_covariates,
            self.tte_covariates,
        )


def log_event_time(subject):
    """Log of the observed event/censoring time."""
    if not subject.event_time > 0:
        raise DomainError(f"subject {subject.subject_id}: event time must be positive")
    return math.log(subject.event_time)


class Packed(NamedTuple):
    """Zero-padded array view of a dataset for vectorized kernels."""

    s: np.ndarray  # (n, m) visit times
    y: np.ndarray  # (n, m) outcomes
    mask: np.ndarray  # (n, m) True on observed visits
    n_obs: np.ndarray  # (n,)
    x: np.ndarray  # (n, p_long)
    xs: np.ndarray  # (n, p_s)
    w: np.ndarray  # (n, p_tte)
    t: np.ndarray  # (n,) log observed time
    event: np.ndarray  # (n,) bool


@dataclass(frozen=True, eq=False)
class StudyDataset:
    subjects: tuple

    def __post_init__(self):
        subjects = tuple(self.subjects)
        object.__setattr__(self, "subjects", subjects)
        if not subjects:
            raise ValidationError("dataset has no subjects")
        dims = {
            (s.long_covariates.size, s.stable_covariates.size, s.tte_covariates.size)
            for s in subjects
        }
        if len(dims) != 1:
            raise ValidationError(f"inconsistent covariate dimensions across subjects: {sorted(dims)}")
        ids = [s.subject_id for s in subjects]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate subject identifiers")

    def __len__(self):
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, i):
        return self.subjects[i]

    @property
    def n(self):
        return len(self.subjects)

    @property
    def total_obs(self):
        return int(sum(s.n_obs for s in self.subjects))

    @property
    def dims(self):
        s = self.subjects[0]
        return s.long_covariates.size, s.stable_covariates.size, s.tte_covariates.size

    @property
    def ids(self):
        return [s.subject_id for s in self.subjects]

    @property
    def labels(self):
        return [s.label for s in self.subjects]

    @cached_property
    def packed(self):
        n = len(self.subjects)
        m = max(s.n_obs for s in self.subjects)
        s_arr = np.zeros((n, m))
        y_arr = np.zeros((n, m))
        mask = np.zeros((n, m), dtype=bool)
        for i, subj in enumerate(self.subjects):
            k = subj.n_obs
            s_arr[i, :k] = subj.visit_times
            y_arr[i, :k] = subj.outcomes
            mask[i, :k] = True
        return Packed(
            s=s_arr,
            y=y_arr,
            mask=mask,
            n_obs=mask.sum(axis=1),
            x=np.array([s.long_covariates for s in self.subjects]).reshape(n, -1),
            xs=np.array([s.stable_covariates for s in self.subjects]).reshape(n, -1),
            w=np.array([s.tte_covariates for s in self.subjects]).reshape(n, -1),
            t=np.log([s.event_time for s in self.subjects]),
            event=np.array([s.event for s in self.subjects], dtype=bool),
        )

    def design_means(self):
        """Sample means of (X, X_(s), w), used to evaluate marginal trajectories."""
        p = self.packed
        return p.x.mean(axis=0), p.xs.mean(axis=0), p.w.mean(axis=0)

    def subset(self, indices, relabel=False):
        """Dataset of the given subject indices (repeats allowed when ``relabel``)."""
        subjects = [self.subjects[i] for i in indices]
        if relabel:
            subjects = [s.with_id(f"{s.subject_id}#{k}") for k, s in enumerate(subjects)]
        return StudyDataset(tuple(subjects))


# ----------------------------------------------------------------------------
# Parameters

@dataclass(frozen=True, eq=False)
class ModelParameters:
    """Full parameter set of the two-group joint model.

    Change-point group: ``tte_coef``/``tte_sd`` (log-normal AFT),
    ``re_mean``/``re_cov`` (pre-truncation moments of (omega, b0, b1, b2)),
    ``long_coef``/``long_sd`` (piecewise LMM).  Stable group:
    ``stable_re_mean``/``stable_re_cov``/``stable_long_coef``/``stable_long_sd``.
    """

    stable_rate: float
    tte_coef: np.ndarray
    tte_sd: float
    re_mean: np.ndarray
    re_cov: np.ndarray
    long_coef: np.ndarray
    long_sd: float
    stable_re_mean: np.ndarray
    stable_re_cov: np.ndarray
    stable_long_coef: np.ndarray
    stable_long_sd: float

    _ARRAYS = ("tte_coef", "re_mean", "re_cov", "long_coef", "stable_re_mean", "stable_re_cov",
               "stable_long_coef")

    def __post_init__(self):
        for name in self._ARRAYS:
            arr = np.array(getattr(self, name), dtype=float)
            if name in ("tte_coef", "long_coef", "stable_long_coef"):
                arr = np.atleast_1d(arr).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("stable_rate", "tte_sd", "long_sd", "stable_long_sd"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not 0.0 <= self.stable_rate <= 1.0:
            raise ValidationError(f"stable_rate must lie in [0, 1], got {self.stable_rate}")
        for name in ("tte_sd", "long_sd", "stable_long_sd"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.re_mean.shape != (4,) or self.re_cov.shape != (4, 4):
            raise ValidationError("re_mean must be a 4-vector and re_cov 4x4")
        if self.stable_re_mean.shape != (2,) or self.stable_re_cov.shape != (2, 2):
            raise ValidationError("stable_re_mean must be a 2-vector and stable_re_cov 2x2")
        for name in ("re_cov", "stable_re_cov"):
            m = getattr(self, name)
            if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
                raise ValidationError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(m).min() <= 0:
                raise ValidationError(f"{name} must be positive definite")

    def replace(self, **changes):
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return ModelParameters(**kw)

    def to_dict(self):
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in cls.__dataclass_fields__ if k not in d]
        if missing:
            raise ValidationError(f"parameter document missing fields {missing}")
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})

    def named_values(self):
        """Flat ``{name: value}`` view; covariance blocks as upper triangles."""
        re_names = ("omega", "b0", "b1", "b2")
        st_names = ("b0", "b1")
        out = {"stable_rate": self.stable_rate}
        for k, v in enumerate(self.tte_coef):
            out[f"tte_coef[{k}]"] = v
        out["tte_sd"] = self.tte_sd
        for k, v in enumerate(self.re_mean):
            out[f"re_mean[{re_names[k]}]"] = v
        for i, j in zip(*np.triu_indices(4)):
            out[f"re_cov[{re_names[i]},{re_names[j]}]"] = self.re_cov[i, j]
        for k, v in enumerate(self.long_coef):
            out[f"long_coef[{k}]"] = v
        out["long_sd"] = self.long_sd
        for k, v in enumerate(self.stable_re_mean):
            out[f"stable_re_mean[{st_names[k]}]"] = v
        for i, j in zip(*np.triu_indices(2)):
            out[f"stable_re_cov[{st_names[i]},{st_names[j]}]"] = self.stable_re_cov[i, j]
        for k, v in enumerate(self.stable_long_coef):
            out[f"stable_long_coef[{k}]"] = v
        out["stable_long_sd"] = self.stable_long_sd
        return {k: float(v) for k, v in out.items()}

    def vector(self):
        return np.array(list(self.named_values().values()))

    @property
    def names(self):
        return list(self.named_values())


# ----------------------------------------------------------------------------
# Ingestion

DEFAULT_SCHEMA = {
    "subject_id": "subject_id",
    "visit_time": "visit_time",
    "outcome": "y",
    "long_covariates": None,  # None -> every column matching x<k>
    "stable_covariates": None,  # None -> same columns as long_covariates
    "event_time": "event_time",
    "event": "event",
    "tte_covariates": None,  # None -> every column matching w<k>
    "arm": None,
}


def load_schema(path=None):
    schema = dict(DEFAULT_SCHEMA)
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        unknown = set(user) - set(DEFAULT_SCHEMA)
        if unknown:
            raise ValidationError(f"unknown schema roles: {sorted(unknown)}")
        schema.update(user)
    return schema


def _prefixed(columns, prefix):
    cols = [c for c in columns if c.startswith(prefix) and c[len(prefix):].isdigit()]
    return sorted(cols, key=lambda c: int(c[len(prefix):]))


def _read_table(source, name):
    if isinstance(source, pd.DataFrame):
        return source.copy()
    path = Path(source)
    if not path.exists():
        raise FileNotFoundError(f"{name} file not found: {path}")
    try:
        return pd.read_csv(path, dtype={0: str}, float_precision="round_trip")
    except Exception as exc:  # pandas raises many types
        raise ParseError(f"could not parse {name} file {path}: {exc}") from exc


def _numeric(df, cols, name):
    for c in cols:
        if c not in df.columns:
            raise ParseError(f"{name}: missing column {c!r}")
        vals = pd.to_numeric(df[c], errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            raise ParseError(f"{name}: non-finite or non-numeric value in column {c!r} at row {int(bad[0])}")
        df[c] = vals
    return df


def ingest_dataset(longitudinal, events, schema=None, time_scale=1.0, split_by_arm=False):
    """Build a validated :class:`StudyDataset` from two tables.

    ``longitudinal`` and ``events`` may be CSV paths or DataFrames.
    ``time_scale`` multiplies all times (``1 / 365.25`` converts days to
    years).  With ``split_by_arm`` the schema's ``arm`` column (event file)
    is used to return ``{arm_value: StudyDataset}``.
    """
    schema = dict(DEFAULT_SCHEMA if schema is None else {**DEFAULT_SCHEMA, **schema})
    long_df = _read_table(longitudinal, "longitudinal")
    ev_df = _read_table(events, "event")
    sid, vt, yc = schema["subject_id"], schema["visit_time"], schema["outcome"]
    etc, evc = schema["event_time"], schema["event"]
    xcols = schema["long_covariates"]
    if xcols is None:
        xcols = _prefixed(long_df.columns, "x")
    xscols = schema["stable_covariates"]
    if xscols is None:
        xscols = list(xcols)
    wcols = schema["tte_covariates"]
    if wcols is None:
        wcols = _prefixed(ev_df.columns, "w")
    for df, cols, name in ((long_df, [sid], "longitudinal"), (ev_df, [sid], "event")):
        if sid not in df.columns:
            raise ParseError(f"{name}: missing column {sid!r}")
        df[sid] = df[sid].astype(str)
    _numeric(long_df, [vt, yc, *xcols, *[c for c in xscols if c not in xcols]], "longitudinal")
    _numeric(ev_df, [etc, evc, *wcols], "event")
    if not set(ev_df[evc].unique()) <= {0.0, 1.0}:
        raise ParseError(f"event: column {evc!r} must contain only 0/1")
    if ev_df[sid].duplicated().any():
        dup = ev_df.loc[ev_df[sid].duplicated(), sid].iloc[0]
        raise ValidationError(f"event: subject {dup} appears more than once")
    missing = sorted(set(long_df[sid]) - set(ev_df[sid]))
    if missing:
        raise LinkageError(f"subjects in the longitudinal file have no event record: {missing[:5]}")
    ev_df[etc] = ev_df[etc] * time_scale
    long_df[vt] = long_df[vt] * time_scale

    groups = {k: g for k, g in long_df.groupby(sid, sort=False)}
    subjects = {}
    arms = {}
    arm_col = schema["arm"]
    for _, row in ev_df.iterrows():
        key = row[sid]
        g = groups.get(key)
        if g is None:
            continue  # event-only subjects carry no longitudinal information
        g = g.sort_values(vt)
        for cols, name in ((xcols, "long"), (xscols, "stable")):
            if cols and (g[cols].nunique() > 1).any():
                raise ValidationError(
                    f"subject {key}: {name} covariates vary across visits; only baseline "
                    "(time-constant) covariates are supported"
                )
        subjects[key] = SubjectData(
            subject_id=key,
            visit_times=g[vt].to_numpy(),
            outcomes=g[yc].to_numpy(),
            event_time=row[etc],
            event=bool(row[evc]),
            long_covariates=g[xcols].iloc[0].to_numpy(dtype=float) if xcols else np.zeros(0),
            stable_covariates=g[xscols].iloc[0].to_numpy(dtype=float) if xscols else np.zeros(0),
            tte_covariates=row[wcols].to_numpy(dtype=float) if wcols else np.zeros(0),
        )
        if arm_col is not None:
            arms[key] = row[arm_col]
    order = [k for k in ev_df[sid] if k in subjects]
    if not split_by_arm:
        return StudyDataset(tuple(subjects[k] for k in order))
    if arm_col is None:
        raise ValidationError("split_by_arm requires an 'arm' column in the schema")
    out = {}
    for k in order:
        out.setdefault(arms[k], []).append(subjects[k])
    return {a: StudyDataset(tuple(v)) for a, v in sorted(out.items(), key=lambda kv: str(kv[0]))}


def dataset_to_frames(dataset, arm=None):
    """Inverse of :func:`ingest_dataset` under the default schema.

    The stable-group covariates are written as ``xs<k>`` columns when they
    differ from the longitudinal ones.
    """
    p_long, p_s, p_tte = dataset.dims
    same = all(
        np.array_equal(s.long_covariates, s.stable_covariates) for s in dataset
    )
    long_rows, ev_rows = [], []
    for s in dataset:
        for t, y in zip(s.visit_times, s.outcomes):
            row = {"subject_id": s.subject_id, "visit_time": t, "y": y}
            row.update({f"x{k + 1}": v for k, v in enumerate(s.long_covariates)})
            if not same:
                row.update({f"xs{k + 1}": v for k, v in enumerate(s.stable_covariates)})
            long_rows.append(row)
        ev = {"subject_id": s.subject_id, "event_time": s.event_time, "event": int(s.event)}
        ev.update({f"w{k + 1}": v for k, v in enumerate(s.tte_covariates)})
        if arm is not None:
            ev["arm"] = arm
        ev_rows.append(ev)
    long_df = pd.DataFrame(long_rows)
    ev_df = pd.DataFrame(ev_rows)
    schema = {}
    if not same:
        schema["stable_covariates"] = [f"xs{k + 1}" for k in range(p_s)]
    return long_df, ev_df, schema


def write_dataset(dataset, long_path, event_path, arm=None):
    long_df, ev_df, schema = dataset_to_frames(dataset, arm)
    long_df.to_csv(long_path, index=False, float_format="%.17g")
    ev_df.to_csv(event_path, index=False, float_format="%.17g")
    return schema


def concat_datasets(parts: Sequence[tuple]):
    """Stack ``(arm, dataset)`` pairs into single long/event frames with an arm column."""
    longs, evs = [], []
    for arm, ds in parts:
        l, e, _ = dataset_to_frames(ds, arm)
        longs.append(l)
        evs.append(e)
    return pd.concat(longs, ignore_index=True), pd.concat(evs, ignore_index=True)
