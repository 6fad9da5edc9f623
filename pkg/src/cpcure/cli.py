"""Command-line front end: ``cpcure {simulate,fit,bootstrap,trajectory,benchmark}``.

Exit codes: 0 success, 1 error, 2 ran but the (point) fit did not converge.
Every command writes ``run.json`` next to its outputs.  The manifest holds
no timestamps or thread counts, so repeated runs with the same seed give
byte-identical directories whatever ``--threads`` is.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DAYS_PER_YEAR, ModelParameters, concat_datasets, ingest_dataset, load_schema, write_dataset
from .exceptions import ConfigError, CpcureError
from .inference import (
    DEFAULT_TRAJECTORY_DRAWS,
    DesignMeans,
    average_treatment_effect,
    bootstrap,
    bootstrap_config,
    default_threads,
    landmarks,
    marginal_trajectory,
    parse_grid,
    trajectory_ci,
)
from .mcem import FitConfig, FitResult, fit
from .simulation import SimConfig, generate_dataset, run_benchmark

logger = logging.getLogger("cpcure")

CONFIG_SECTIONS = ("fit", "bootstrap", "simulation", "trajectory")
TRAJECTORY_KEYS = ("J", "J_boot")


# ----------------------------------------------------------------------------
# config handling

def _check_keys(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError("expected a JSON object", where)
    for k in section:
        if k not in allowed:
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(allowed))})", f"{where}.{k}")


def _fit_config(section, where, base=None):
    base = base or FitConfig()
    _check_keys(section, set(FitConfig.__dataclass_fields__) - {"seed"}, where)
    try:
        d = base.to_dict()
        d.update(section)
        return FitConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), where) from None


def load_config(path):
    """Parse the optional JSON config into its sections (all optional)."""
    doc = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    _check_keys(doc, set(CONFIG_SECTIONS), "config")
    out = {"raw": doc}
    out["fit"] = _fit_config(doc.get("fit", {}), "config.fit")
    out["bootstrap"] = _fit_config(doc.get("bootstrap", {}), "config.bootstrap", bootstrap_config(out["fit"]))
    traj = doc.get("trajectory", {})
    _check_keys(traj, set(TRAJECTORY_KEYS), "config.trajectory")
    for k, v in traj.items():
        if not isinstance(v, int) or v < 1:
            raise ConfigError("must be a positive integer", f"config.trajectory.{k}")
    out["trajectory"] = traj
    sim = doc.get("simulation", {})
    _check_keys(sim, set(SimConfig.__dataclass_fields__) - {"seed"}, "config.simulation")
    if "truth" in sim:
        _check_keys(sim["truth"], set(ModelParameters.__dataclass_fields__), "config.simulation.truth")
    out["simulation"] = sim
    return out


def _sim_config(args, cfg, seed):
    sim = dict(cfg["simulation"])
    try:
        base = SimConfig.from_dict({**sim, "seed": seed}) if sim else SimConfig(seed=seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), "config.simulation") from None
    changes = {}
    if args.n is not None:
        changes["n"] = args.n
    if getattr(args, "reps", None) is not None:
        changes["replications"] = args.reps
    if getattr(args, "censor_rate", None) is not None:
        changes["censor_rate"] = args.censor_rate
    truth = base.truth
    if args.pi is not None:
        truth = truth.replace(stable_rate=args.pi)
    if args.mu_r is not None:
        truth = truth.replace(re_mean=args.mu_r)
    d = base.to_dict()
    d.update(changes)
    d["truth"] = truth.to_dict()
    return SimConfig.from_dict(d)


# ----------------------------------------------------------------------------
# output helpers

def _versions():
    import pandas
    import scipy

    return {"cpcure": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pandas.__version__, "python": platform.python_version()}


def _write_manifest(out, command, args, cfg, extra=None):
    skip = {"threads", "out", "func", "verbose"}
    echo = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    doc = {"command": command, "arguments": echo, "config": cfg["raw"] if cfg else {},
           "seed": args.seed, "versions": _versions()}
    if extra:
        doc.update(extra)
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _load_data(args, split=False):
    if args.long is None or args.events is None:
        raise CpcureError("--long and --events are required")
    for p in (args.long, args.events):
        if not Path(p).exists():
            raise FileNotFoundError(f"input file not found: {p}")
    schema = load_schema(args.schema)
    if split and schema.get("arm") is None:
        schema["arm"] = "arm"
    scale = 1.0 / DAYS_PER_YEAR if args.input_days else 1.0
    return ingest_dataset(args.long, args.events, schema, time_scale=scale, split_by_arm=split)


def _diagnostic_writer(path):
    fh = open(path, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["iteration", "subject_id", "ess", "responsibility"])

    def callback(it, stats):
        for sid, ess, resp in stats.diagnostic_rows():
            w.writerow([it, sid, repr(float(ess)), repr(float(resp))])
    return fh, callback


# ----------------------------------------------------------------------------
# commands

def cmd_simulate(args, cfg, out):
    sc = _sim_config(args, cfg, args.seed)
    if args.arm_sizes is None:
        arms = [(None, sc)]
    else:
        control = sc.truth if args.mu_r_control is None else sc.truth.replace(re_mean=args.mu_r_control)
        arms = [("treatment", dataclasses.replace(sc, n=args.arm_sizes[0])),
                ("control", dataclasses.replace(sc, n=args.arm_sizes[1], truth=control))]
    seeds = np.random.SeedSequence(args.seed).spawn(len(arms)) if len(arms) > 1 else [args.seed]
    sims = [(arm, c, generate_dataset(c, np.random.default_rng(ss), id_prefix="s" if arm is None else arm[0]))
            for (arm, c), ss in zip(arms, seeds)]
    if len(sims) == 1:
        schema = write_dataset(sims[0][2].dataset, out / "long.csv", out / "events.csv")
    else:
        long_df, ev_df = concat_datasets([(arm, sim.dataset) for arm, _, sim in sims])
        long_df.to_csv(out / "long.csv", index=False, float_format="%.17g")
        ev_df.to_csv(out / "events.csv", index=False, float_format="%.17g")
        schema = {}
    if schema:
        (out / "schema.json").write_text(json.dumps(schema, indent=2, sort_keys=True) + "\n")
    rows = []
    for arm, _, sim in sims:
        rows += [[s.subject_id, arm or "", lab.name.lower(), *map(float, r), float(t)]
                 for s, lab, r, t in zip(sim.dataset, sim.labels, sim.random_effects, sim.log_event_times)]
    _write_csv(out / "truth_labels.csv",
               ["subject_id", "arm", "group", "omega", "b0", "b1", "b2", "log_event_time"], rows)
    scen = {arm or "all": c.to_dict() for arm, c, _ in sims}
    (out / "scenario.json").write_text(json.dumps(scen, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "simulate", args, cfg,
                    {"regenerated_subjects": sum(sim.regenerated for _, _, sim in sims)})
    return 0


def _fit_one(args, cfg, dataset, out, name="fit"):
    fc = cfg["fit"].replace(seed=args.seed, baseline_mode=args.baseline)
    fh = None
    callback = None
    if args.diagnostics:
        fh, callback = _diagnostic_writer(out / f"{name}_diagnostics.csv")
    try:
        res = fit(dataset, fc, callback=callback)
    finally:
        if fh is not None:
            fh.close()
    res.to_json(out / f"{name}.json", design_means=DesignMeans.of(dataset).to_dict(), n_subjects=dataset.n)
    return res


def cmd_fit(args, cfg, out):
    data = _load_data(args, split=args.by_arm)
    parts = data if isinstance(data, dict) else {None: data}
    ok = True
    for arm, ds in parts.items():
        res = _fit_one(args, cfg, ds, out, "fit" if arm is None else f"fit_{arm}")
        ok &= res.converged
        if not res.converged:
            print(f"warning: EM did not converge in {res.iterations_used} iterations"
                  + ("" if arm is None else f" (arm {arm})"), file=sys.stderr)
    _write_manifest(out, "fit", args, cfg)
    return 0 if ok else 2


def cmd_bootstrap(args, cfg, out):
    data = _load_data(args)
    res = _fit_one(args, cfg, data, out)
    bc = cfg["bootstrap"].replace(baseline_mode=args.baseline)
    boot = bootstrap(data, bc, args.B, seed=args.seed, init=res.params, threads=args.threads)
    doc = {"point": res.to_dict(), "bootstrap": boot.to_dict(),
           "design_means": DesignMeans.of(data).to_dict()}
    (out / "bootstrap.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    names = boot.names
    point = res.params.named_values()
    se = boot.standard_errors()
    _write_csv(out / "bootstrap_summary.csv", ["parameter", "estimate", "se", "lo", "hi"],
               [[n, point[n], se[n], boot.ci_lower[n], boot.ci_upper[n]] for n in names])
    _write_manifest(out, "bootstrap", args, cfg, {"failures": boot.failures})
    for w in boot.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0 if res.converged else 2


def _load_fit_doc(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"fit result not found: {p}")
    doc = json.loads(p.read_text())
    if "bootstrap" in doc:  # output of the bootstrap command
        point = FitResult.from_dict(doc["point"])
        reps = [None if r is None else ModelParameters.from_dict(r)
                for r in doc["bootstrap"]["replicate_params"]]
        reps = [r for r in reps if r is not None]
        return point, doc["design_means"], reps
    return FitResult.from_dict(doc), doc.get("design_means"), []


def _nan_or(arr, k):
    return float("nan") if arr is None else arr[k]


def _write_trajectories(out, arms, effect, marks, days, extra=None):
    tcols = ["time"] + (["time_days"] if days else [])

    def times(t):
        return [float(t)] + ([float(t) * DAYS_PER_YEAR] if days else [])

    single = len(arms) == 1
    for name, traj in arms.items():
        fname = "trajectory.csv" if single else f"trajectory_{name}.csv"
        _write_csv(out / fname, tcols + ["mean", "lo", "hi"],
                   [times(t) + [traj.mean[k], _nan_or(traj.ci_lower, k), _nan_or(traj.ci_upper, k)]
                    for k, t in enumerate(traj.grid)])
    if effect is not None:
        _write_csv(out / "ate.csv", tcols + ["ate", "ate_lo", "ate_hi"],
                   [times(t) + [effect.ate[k], _nan_or(effect.ci_lower, k), _nan_or(effect.ci_upper, k)]
                    for k, t in enumerate(effect.grid)])
    doc = {"landmarks_years": marks, "arms": list(arms), "contrast": " - ".join(arms) if not single else None}
    if days:
        doc["landmarks_days"] = {k: (None if v is None else v * DAYS_PER_YEAR) for k, v in marks.items()}
    if extra:
        doc.update(extra)
    (out / "landmarks.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_trajectory(args, cfg, out):
    grid = parse_grid(args.grid)
    J = cfg["trajectory"].get("J", args.J or DEFAULT_TRAJECTORY_DRAWS)
    if args.fit_files:
        if len(args.fit_files) > 2:
            raise CpcureError("--fit accepts one or two result files")
        arms, curves, conv = {}, {}, True
        seeds = np.random.SeedSequence(args.seed).spawn(len(args.fit_files))
        for k, (path, ss) in enumerate(zip(args.fit_files, seeds)):
            res, dm, reps = _load_fit_doc(path)
            conv &= res.converged
            if dm is None:
                raise CpcureError(f"{path} has no design_means; refit with this version")
            dm = DesignMeans(*(np.asarray(dm[f]) for f in ("x", "xs", "w")))
            name = f"arm{k + 1}" if len(args.fit_files) == 2 else "arm1"
            traj = marginal_trajectory(res.params, dm, grid, J, np.random.default_rng(ss))
            if reps:
                J_boot = cfg["trajectory"].get("J_boot", max(J // 10, 1000))
                cs = [marginal_trajectory(p, dm, grid, J_boot, np.random.default_rng([args.seed, k, i])).mean
                      for i, p in enumerate(reps)]
                traj = traj.with_bands(cs)
            arms[name] = traj
        effect, marks = None, {"band_separation": None, "ate_upper_below_zero": None,
                               "ate_excludes_zero": None}
        if len(arms) == 2:
            a, c = arms.values()
            effect = average_treatment_effect(a, c)
            marks = landmarks(a, c, effect)
        _write_trajectories(out, arms, effect, marks, args.days)
        _write_manifest(out, "trajectory", args, cfg)
        return 0 if conv else 2
    data = _load_data(args, split=True)
    if len(data) > 2:
        raise CpcureError(f"expected at most two arms, found {sorted(map(str, data))}")
    first = args.treatment if args.treatment is not None else "treatment"
    if any(str(a) == str(first) for a in data):
        order = sorted(data, key=lambda a: str(a) != str(first))
        data = {a: data[a] for a in order}
    fc = cfg["fit"].replace(seed=args.seed, baseline_mode=args.baseline)
    bc = cfg["bootstrap"].replace(baseline_mode=args.baseline)
    fits = {a: fit(ds, fc.replace(seed=args.seed + k)) for k, (a, ds) in enumerate(data.items())}
    for a, r in fits.items():
        r.to_json(out / f"fit_{a}.json", design_means=DesignMeans.of(data[a]).to_dict(), n_subjects=data[a].n)
    rep = trajectory_ci(data, bc, args.B, grid, J, seed=args.seed, threads=args.threads,
                        J_boot=cfg["trajectory"].get("J_boot"), fits=fits)
    _write_trajectories(out, {str(a): t for a, t in rep.arms.items()}, rep.effect, rep.landmarks, args.days,
                        {"failures": {str(a): f for a, f in rep.failures.items()}})
    _write_manifest(out, "trajectory", args, cfg)
    return 0 if all(r.converged for r in fits.values()) else 2


def cmd_benchmark(args, cfg, out):
    sc = _sim_config(args, cfg, args.seed)
    J = cfg["trajectory"].get("J", args.J or 20_000)
    res = run_benchmark(sc, cfg["fit"], include_baseline=args.baseline, B=args.B, boot_config=cfg["bootstrap"],
                        grid=parse_grid(args.grid), J=J, threads=args.threads)
    prow = res.parameter_rows()
    _write_csv(out / "parameters.csv", ["model", "parameter", "scenario", "bias", "mse", "cover"],
               [[r["model"], r["parameter"], r["scenario"], r["bias"], r["mse"], r["cover"]] for r in prow])
    trow = res.trajectory_rows()
    _write_csv(out / "trajectory.csv", ["model", "time", "scenario", "truth", "bias", "mse", "cover"],
               [[r["model"], r["time"], r["scenario"], r["truth"], r["bias"], r["mse"], r["cover"]] for r in trow])
    est_rows = []
    for o in res.outcomes:
        for model, vec in o.estimates.items():
            est_rows.append([o.index, model, bool(o.converged[model]), *vec])
    _write_csv(out / "estimates.csv", ["replication", "model", "converged", *sc.truth.names], est_rows)
    (out / "scenario.json").write_text(json.dumps(sc.to_dict(), indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "benchmark", args, cfg, {"failed_replications": res.failures,
                                                  "nonconverged": res.nonconverged})
    return 0


# ----------------------------------------------------------------------------
# parser

def _floats(text):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if len(vals) != 4:
        raise argparse.ArgumentTypeError("--mu-r needs four values: omega,b0,b1,b2")
    return vals


def _sizes(text):
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two integers, got {text!r}") from None
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError("--arm-sizes needs two positive integers")
    return vals


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory (created if missing)")
    common.add_argument("--config", help="JSON config with optional fit/bootstrap/simulation/trajectory sections")
    common.add_argument("--seed", type=_seed, default=0)
    common.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--long", help="longitudinal CSV: subject_id,visit_time,y,x1..xp")
    data.add_argument("--events", help="event CSV: subject_id,event_time,event,w1..wq")
    data.add_argument("--schema", help="JSON mapping column names to roles")
    data.add_argument("--input-days", action="store_true", help="input times are in days (converted to years)")
    data.add_argument("--baseline", action="store_true", help="change-point-only model (stable rate fixed at 0)")

    scen = argparse.ArgumentParser(add_help=False)
    scen.add_argument("--n", type=int, default=None)
    scen.add_argument("--pi", type=float, default=None)
    scen.add_argument("--mu-r", type=_floats, default=None, help="omega,b0,b1,b2")
    scen.add_argument("--censor-rate", type=float, default=None)

    p = argparse.ArgumentParser(prog="cpcure", description="Fit, bootstrap and simulate the cure-mixture change-point model.")
    p.add_argument("--version", action="version", version=f"cpcure {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common, scen], help="draw one synthetic dataset")
    s.add_argument("--arm-sizes", type=_sizes, default=None,
                   help="N1,N2: write a two-arm dataset (treatment, control) with an arm column")
    s.add_argument("--mu-r-control", type=_floats, default=None, help="control-arm omega,b0,b1,b2")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", parents=[common, data], help="fit the joint model by MCEM")
    f.add_argument("--by-arm", action="store_true", help="fit each arm of the event file's arm column")
    f.add_argument("--diagnostics", action="store_true", help="write per-iteration ESS/responsibility CSV")
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("bootstrap", parents=[common, data], help="point fit plus percentile bootstrap")
    b.add_argument("--B", type=int, default=100)
    b.add_argument("--diagnostics", action="store_true")
    b.set_defaults(func=cmd_bootstrap)

    t = sub.add_parser("trajectory", parents=[common, data], help="marginal trajectories, ATE and landmarks")
    t.add_argument("--fit", dest="fit_files", action="append", help="fit or bootstrap JSON (repeat for two arms)")
    t.add_argument("--B", type=int, default=100)
    t.add_argument("--J", type=int, default=None, help="Monte Carlo draws per trajectory")
    t.add_argument("--grid", default="0.1,2.0,0.1", help="start,stop,step in years")
    t.add_argument("--days", action="store_true", help="also report times in days")
    t.add_argument("--treatment", help="arm listed first in the contrast (default: an arm named 'treatment' if present)")
    t.set_defaults(func=cmd_trajectory)

    m = sub.add_parser("benchmark", parents=[common, scen], help="replicated simulation study")
    m.add_argument("--reps", type=int, default=None)
    m.add_argument("--B", type=int, default=100)
    m.add_argument("--J", type=int, default=None)
    m.add_argument("--grid", default="0.1,2.0,0.1")
    m.add_argument("--baseline", action="store_true", help="also fit the change-point-only comparator")
    m.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    try:
        cfg = load_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return args.func(args, cfg, out)
    except (CpcureError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
