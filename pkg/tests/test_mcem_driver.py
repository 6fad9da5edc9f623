import numpy as np
import pytest

from cpcure.data import StudyDataset, SubjectData
from cpcure.mcem import (
    FitConfig,
    FitResult,
    ascent_pairs,
    fit,
    initialize_params,
    observed_loglik,
    parameter_change,
    smoothed,
    smoothed_se,
)

FAST = FitConfig(max_em_iter=8, draws_initial=100, min_iter=3)


@pytest.fixture(scope="module")
def short_fit(medium_sim):
    seen = []
    res = fit(medium_sim.dataset, FAST.replace(seed=4), callback=lambda it, st: seen.append((it, st.n)))
    return res, seen


def test_initial_values_are_valid(medium_sim):
    p = initialize_params(medium_sim.dataset)
    assert 0 < p.stable_rate < 1
    assert initialize_params(medium_sim.dataset, baseline_mode=True).stable_rate == 0.0


def test_fit_runs_and_reports(short_fit, medium_sim):
    res, seen = short_fit
    assert 1 <= res.iterations_used <= FAST.max_em_iter
    assert len(res.loglik_trace) == len(res.loglik_se) == res.iterations_used
    assert [s[0] for s in seen] == list(range(res.iterations_used))
    assert all(n == medium_sim.dataset.n for _, n in seen)
    assert np.all(np.isfinite(res.params.vector()))
    assert len(res.diagnostics["param_change"]) == res.iterations_used


def test_fit_improves_on_initial_loglik(short_fit):
    res, _ = short_fit
    assert res.loglik_trace[-1] > res.loglik_trace[0]


def test_fit_is_deterministic(medium_sim, short_fit):
    again = fit(medium_sim.dataset, FAST.replace(seed=4))
    assert np.array_equal(again.params.vector(), short_fit[0].params.vector())
    other = fit(medium_sim.dataset, FAST.replace(seed=5, max_em_iter=2))
    assert not np.array_equal(other.params.vector(), short_fit[0].params.vector())


def test_result_json_roundtrip(short_fit, tmp_path):
    res, _ = short_fit
    path = tmp_path / "fit.json"
    res.to_json(path, note="x")
    back, doc = FitResult.from_json(path)
    assert doc["note"] == "x"
    assert np.array_equal(back.params.vector(), res.params.vector())
    assert back.config.to_dict() == res.config.to_dict()
    assert back.loglik_trace == res.loglik_trace


def test_baseline_mode_keeps_zero_stable_rate(medium_sim):
    res = fit(medium_sim.dataset, FAST.replace(max_em_iter=3, baseline_mode=True))
    assert res.params.stable_rate == 0.0


def test_convergence_flag(medium_sim, truth):
    res = fit(medium_sim.dataset, FAST.replace(rel_tol=10.0, max_em_iter=10))
    assert res.converged and res.iterations_used == FAST.min_iter
    res = fit(medium_sim.dataset, FAST.replace(rel_tol=1e-12, max_em_iter=4))
    assert not res.converged and res.iterations_used == 4


def test_observed_loglik_near_estep_trace(medium_sim, truth):
    ll, se = observed_loglik(medium_sim.dataset, truth.replace(stable_rate=0.2), K=300)
    assert np.isfinite(ll) and se > 0


def test_parameter_change_scale(truth):
    assert parameter_change(truth, truth) == 0.0
    moved = truth.replace(re_mean=truth.re_mean + np.array([0.0, 0.0, 0.0, 0.1]))
    assert parameter_change(truth, moved) == pytest.approx(0.1 / 1.0)


def test_smoothing_and_ascent():
    tr = [0.0, 1.0, 2.0, 3.0, 2.9]
    assert np.allclose(smoothed(tr), [1.0, 2.0, 2.6333333333])
    assert np.allclose(smoothed_se([1, 1, 1]), [np.sqrt(3) / 3])
    assert ascent_pairs([0, 1, 2, 3], [0.1] * 4).all()
    assert not ascent_pairs([0, 0, 0, -10], [0.01] * 4).all()


def test_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        FitConfig(max_em_iter=0)
    c = FitConfig(rel_tol=0.01)
    assert FitConfig.from_dict(c.to_dict()).to_dict() == c.to_dict()
    assert c.draws(0) == 200 and c.draws(10) == 300 and FitConfig(draws_max=250).draws(50) == 250
    with pytest.raises(Exception, match="unknown"):
        FitConfig.from_dict({"bogus": 1})


def test_constant_covariate_warns():
    rng = np.random.default_rng(0)
    subs = []
    for i in range(12):
        s = np.array([0.1, 0.2, 0.3, 0.4])
        subs.append(SubjectData(f"c{i}", s, rng.normal(0, 0.1, 4), 0.5 + 0.1 * i, i % 3 != 0, [1.0], [1.0],
                                [rng.normal()]))
    with pytest.warns(UserWarning, match="constant column"):
        from cpcure.mcem import _check_rank
        _check_rank(StudyDataset(tuple(subs)))
