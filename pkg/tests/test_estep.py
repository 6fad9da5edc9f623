import numpy as np
import pytest

from cpcure.data import StudyDataset
from cpcure.estep import (
    censored_expectations,
    event_expectations,
    responsibility,
    run_estep,
    subject_rng,
)
from cpcure.exceptions import DegeneracyError
from oracles import censored_quadrature, event_quadrature


def _pick(ds, event, k=2):
    return [s for s in ds if s.event == event and s.n_obs <= 4][:k]


def test_event_subject_matches_quadrature(small_sim, truth):
    subs = _pick(small_sim.dataset, True)
    ds = StudyDataset(tuple(subs))
    st = run_estep(ds, truth, K=4000, seed=1)
    for i, s in enumerate(subs):
        q = event_quadrature(s, truth)
        z = (st.expect(st.omega)[i] - q["omega"]) / st.mc_se(st.omega)[i]
        assert abs(z) < 4
        assert st.log_evidence_cp[i] == pytest.approx(q["log_evidence"], abs=4 * np.sqrt(st.log_evidence_cp_var[i]) + 1e-3)
        assert np.allclose(st.t_star[st.offsets[i]:st.offsets[i + 1]], np.log(s.event_time))


def test_censored_subject_matches_quadrature(small_sim, truth):
    subs = _pick(small_sim.dataset, False)
    ds = StudyDataset(tuple(subs))
    st = run_estep(ds, truth, K=4000, seed=2)
    for i, s in enumerate(subs):
        q = censored_quadrature(s, truth)
        for key, vals in (("omega", st.omega), ("t_star", st.t_star)):
            z = (st.expect(vals)[i] - q[key]) / st.mc_se(vals)[i]
            assert abs(z) < 4, key
        r = st.responsibility[i]
        se = r * (1 - r) * np.sqrt(st.log_evidence_cp_var[i])
        assert abs(r - q["responsibility"]) < 4 * se + 1e-4
        assert np.all(st.t_star[st.offsets[i]:st.offsets[i + 1]] > np.log(s.event_time))


def test_weights_normalized_and_draws_respect_truncation(small_sim, truth):
    st = run_estep(small_sim.dataset, truth, K=200, seed=0)
    sums = np.add.reduceat(st.weight, st.offsets[:-1])
    assert np.allclose(sums, 1.0)
    assert np.all(st.omega > 0)
    assert np.all(st.omega <= np.exp(st.t_star))
    assert np.all((st.ess >= 1 - 1e-9) & (st.ess <= st.draws_per_subject + 1e-9))
    assert np.all(st.responsibility[st.event] == 0)
    assert np.all((st.cp_weight >= 0) & (st.cp_weight <= 1))


def test_output_independent_of_subject_order(small_sim, truth):
    ds = small_sim.dataset
    perm = np.random.default_rng(0).permutation(ds.n)
    a = run_estep(ds, truth, K=100, seed=5, iteration=3)
    b = run_estep(ds.subset(perm), truth, K=100, seed=5, iteration=3)
    assert np.allclose(a.subject_loglik[perm], b.subject_loglik, rtol=0, atol=1e-12)
    assert np.allclose(a.responsibility[perm], b.responsibility, atol=1e-15)


def test_deterministic_streams():
    a = subject_rng(1, 2, "s1").random(3)
    assert np.array_equal(a, subject_rng(1, 2, "s1").random(3))
    assert not np.array_equal(a, subject_rng(1, 3, "s1").random(3))
    assert not np.array_equal(a, subject_rng(1, 2, "s2").random(3))
    subject_rng(0, -1, "x")  # negative iteration tags are valid


def test_ess_floor_triggers_redraw(small_sim, truth):
    st = run_estep(small_sim.dataset, truth, K=20, seed=0, ess_floor=1.0)
    assert np.all(st.draws_per_subject == 80)
    st2 = run_estep(small_sim.dataset, truth, K=20, seed=0, ess_floor=0.0)
    assert np.all(st2.draws_per_subject == 20)


def test_responsibility_formula_and_degeneracy():
    r = responsibility(np.log(0.2), np.log(0.6), 0.25)
    assert r == pytest.approx(0.25 * 0.2 / (0.25 * 0.2 + 0.75 * 0.6))
    assert responsibility(-1e5, 0.0, 0.5) == pytest.approx(0.0)
    assert responsibility(0.0, -np.inf, 0.5) == 1.0
    with pytest.raises(DegeneracyError, match="s9"):
        responsibility(-np.inf, -np.inf, 0.3, subject_id="s9")


def test_loglik_is_sum_of_subject_terms(small_sim, truth):
    st = run_estep(small_sim.dataset, truth, K=100)
    assert st.loglik == pytest.approx(st.subject_loglik.sum())
    assert st.loglik_se > 0


def test_expected_zb_shape(small_sim, truth):
    ds = small_sim.dataset
    st = run_estep(ds, truth, K=50)
    zb = st.expected_zb(ds)
    assert zb.shape == ds.packed.s.shape
    assert np.all(zb[~ds.packed.mask] == 0)


def test_single_subject_helpers(small_sim, truth):
    ev = next(s for s in small_sim.dataset if s.event)
    ce = next(s for s in small_sim.dataset if not s.event)
    draws, log_ev = event_expectations(ev, truth, K=50)
    assert len(draws) == 50 and np.isfinite(log_ev)
    assert sum(d.weight for d in draws) == pytest.approx(1.0)
    draws, _ = censored_expectations(ce, truth, K=50)
    assert all(d.t_star > np.log(ce.event_time) for d in draws)
    with pytest.raises(ValueError):
        event_expectations(ce, truth)
    with pytest.raises(ValueError):
        censored_expectations(ev, truth)
