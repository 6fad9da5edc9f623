import json

import pandas as pd
import pytest

from cpcure.cli import main

TINY = {"fit": {"max_em_iter": 2, "min_iter": 1, "draws_initial": 30},
        "bootstrap": {"max_em_iter": 1, "min_iter": 1, "draws_initial": 20},
        "trajectory": {"J": 300, "J_boot": 100}}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["simulate", "--out", str(root / "one"), "--n", "30", "--pi", "0.2", "--seed", "3"]) == 0
    assert main(["simulate", "--out", str(root / "two"), "--arm-sizes", "20,18", "--seed", "4"]) == 0
    return root


def _data(root, sub):
    return ["--long", str(root / sub / "long.csv"), "--events", str(root / sub / "events.csv")]


def _cfg(root):
    return ["--config", str(root / "tiny.json")]


def test_simulate_outputs(workdir):
    one = workdir / "one"
    for f in ("long.csv", "events.csv", "truth_labels.csv", "scenario.json", "run.json"):
        assert (one / f).exists()
    labels = pd.read_csv(one / "truth_labels.csv")
    assert len(labels) == 30 and set(labels.group) <= {"stable", "change_point"}
    arms = pd.read_csv(workdir / "two" / "truth_labels.csv")
    assert arms.arm.value_counts().to_dict() == {"treatment": 20, "control": 18}
    run = json.loads((one / "run.json").read_text())
    assert "threads" not in json.dumps(run)


def test_fit_writes_json_and_diagnostics(workdir):
    out = workdir / "fit"
    code = main(["fit", "--out", str(out), *_data(workdir, "one"), *_cfg(workdir), "--diagnostics"])
    assert code in (0, 2)
    doc = json.loads((out / "fit.json").read_text())
    assert doc["n_subjects"] == 30 and "design_means" in doc
    diag = pd.read_csv(out / "fit_diagnostics.csv")
    assert list(diag.columns) == ["iteration", "subject_id", "ess", "responsibility"]
    assert diag.subject_id.nunique() == 30


def test_nonconvergence_exit_code(workdir):
    out = workdir / "noconv"
    cfg = workdir / "noconv.json"
    cfg.write_text(json.dumps({"fit": {"max_em_iter": 1, "min_iter": 1, "draws_initial": 20}}))
    assert main(["fit", "--out", str(out), *_data(workdir, "one"), "--config", str(cfg)]) == 2


def test_bootstrap_and_trajectory_pipeline(workdir):
    out = workdir / "boot"
    code = main(["bootstrap", "--out", str(out), *_data(workdir, "one"), *_cfg(workdir), "--B", "3",
                 "--threads", "1"])
    assert code in (0, 2)
    summ = pd.read_csv(out / "bootstrap_summary.csv")
    assert list(summ.columns) == ["parameter", "estimate", "se", "lo", "hi"]
    assert (summ.lo <= summ.hi).all()
    tout = workdir / "traj_fit"
    code = main(["trajectory", "--out", str(tout), "--fit", str(out / "bootstrap.json"), "--grid", "0.5,1.0,0.5",
                 *_cfg(workdir), "--days"])
    assert code in (0, 2)  # 2 flags that the stored point fit never converged
    tr = pd.read_csv(tout / "trajectory.csv")
    assert list(tr.columns) == ["time", "time_days", "mean", "lo", "hi"] and len(tr) == 2


def test_two_arm_trajectory(workdir):
    out = workdir / "traj2"
    code = main(["trajectory", "--out", str(out), *_data(workdir, "two"), *_cfg(workdir), "--B", "2",
                 "--grid", "0.5,1.0,0.5", "--threads", "1"])
    assert code in (0, 2)
    ate = pd.read_csv(out / "ate.csv")
    assert list(ate.columns) == ["time", "ate", "ate_lo", "ate_hi"]
    marks = json.loads((out / "landmarks.json").read_text())
    assert marks["arms"] == ["treatment", "control"] and marks["contrast"] == "treatment - control"
    for arm in ("treatment", "control"):
        assert (out / f"trajectory_{arm}.csv").exists()


def test_threads_do_not_change_output(workdir):
    outs = []
    for t in ("1", "2"):
        out = workdir / f"thr{t}"
        main(["bootstrap", "--out", str(out), *_data(workdir, "one"), *_cfg(workdir), "--B", "3", "--threads", t])
        outs.append(out)
    for f in ("bootstrap.json", "bootstrap_summary.csv", "fit.json", "run.json"):
        assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()


def test_benchmark_tiny(workdir):
    out = workdir / "bench"
    code = main(["benchmark", "--out", str(out), "--n", "25", "--reps", "2", "--B", "2", "--J", "300",
                 "--grid", "0.5,1.0,0.5", *_cfg(workdir), "--baseline", "--threads", "1"])
    assert code == 0
    par = pd.read_csv(out / "parameters.csv")
    assert set(par.model) == {"full", "baseline"}
    assert (out / "trajectory.csv").exists() and (out / "estimates.csv").exists()


def test_errors_exit_one(workdir, capsys):
    bad = workdir / "bad.json"
    bad.write_text(json.dumps({"fit": {"rel_tl": 1e-3}}))
    assert main(["fit", "--out", str(workdir / "e1"), *_data(workdir, "one"), "--config", str(bad)]) == 1
    assert "config.fit.rel_tl" in capsys.readouterr().err
    assert main(["fit", "--out", str(workdir / "e2"), "--long", "missing.csv", "--events", "missing.csv"]) == 1
    bad.write_text(json.dumps({"trajectory": {"J": -1}}))
    assert main(["fit", "--out", str(workdir / "e3"), *_data(workdir, "one"), "--config", str(bad)]) == 1
    assert "config.trajectory.J" in capsys.readouterr().err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "cpcure" in capsys.readouterr().out
