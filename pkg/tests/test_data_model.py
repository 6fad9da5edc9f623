import json

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpcure.data import (
    GroupLabel,
    ModelParameters,
    StudyDataset,
    SubjectData,
    concat_datasets,
    dataset_to_frames,
    ingest_dataset,
    load_schema,
    log_event_time,
    write_dataset,
)
from cpcure.exceptions import LinkageError, ParseError, ValidationError


def subject(sid="a", s=(0.1, 0.2, 0.3), y=(0.0, -0.1, 0.05), t=0.5, event=True):
    return SubjectData(sid, np.array(s), np.array(y), t, event, [1.0], [1.0], [0.5])


def test_subject_validation():
    with pytest.raises(ValidationError, match="after the event time"):
        subject(t=0.25)
    with pytest.raises(ValidationError, match="strictly increasing"):
        subject(s=(0.1, 0.1, 0.3))
    with pytest.raises(ValidationError, match="2 outcomes|3 visit times"):
        subject(y=(0.0, 1.0))
    with pytest.raises(ValidationError, match="positive"):
        subject(t=0.0)
    with pytest.raises(ValidationError):
        subject(y=(0.0, np.nan, 1.0))


def test_labels_and_log_time():
    assert subject().label is GroupLabel.CHANGE_POINT
    assert subject(event=False).label is GroupLabel.UNKNOWN
    assert log_event_time(subject(t=2.0)) == pytest.approx(np.log(2.0))


def test_dataset_checks():
    with pytest.raises(ValidationError, match="duplicate"):
        StudyDataset((subject("a"), subject("a")))
    other = SubjectData("b", [0.1], [0.0], 1.0, False, [1.0, 2.0], [1.0], [0.5])
    with pytest.raises(ValidationError, match="inconsistent covariate"):
        StudyDataset((subject("a"), other))
    with pytest.raises(ValidationError):
        StudyDataset(())


def test_packed_layout(small_sim):
    ds = small_sim.dataset
    p = ds.packed
    assert p.s.shape == p.y.shape == p.mask.shape
    assert np.array_equal(p.n_obs, [s.n_obs for s in ds])
    assert np.all(p.s[~p.mask] == 0)
    assert np.allclose(p.t, [np.log(s.event_time) for s in ds])


def test_subset_relabel_gives_unique_ids(small_sim):
    ds = small_sim.dataset
    sub = ds.subset([0, 0, 1], relabel=True)
    assert len(set(sub.ids)) == 3
    assert np.array_equal(sub[0].outcomes, sub[1].outcomes)


def test_parameters_validation(truth):
    with pytest.raises(ValidationError, match="stable_rate"):
        truth.replace(stable_rate=1.5)
    with pytest.raises(ValidationError, match="positive definite"):
        truth.replace(re_cov=-np.eye(4))
    with pytest.raises(ValidationError, match="symmetric"):
        bad = np.array(truth.re_cov)
        bad[0, 1] += 0.01
        truth.replace(re_cov=bad)
    with pytest.raises(ValidationError, match="positive"):
        truth.replace(long_sd=0.0)


def test_parameters_roundtrip_and_names(truth):
    again = ModelParameters.from_dict(json.loads(json.dumps(truth.to_dict())))
    assert np.array_equal(again.vector(), truth.vector())
    names = truth.names
    assert len(names) == len(set(names)) == truth.vector().size
    assert "re_mean[omega]" in names and "re_cov[b1,b2]" in names
    with pytest.raises(ValidationError, match="missing"):
        ModelParameters.from_dict({"stable_rate": 0.1})


def test_csv_roundtrip(tmp_path, small_sim):
    ds = small_sim.dataset
    write_dataset(ds, tmp_path / "l.csv", tmp_path / "e.csv")
    back = ingest_dataset(tmp_path / "l.csv", tmp_path / "e.csv")
    assert back.ids == ds.ids
    for a, b in zip(ds, back):
        assert np.array_equal(a.visit_times, b.visit_times)
        assert np.array_equal(a.outcomes, b.outcomes)
        assert a.event == b.event and a.event_time == b.event_time
        assert np.array_equal(a.tte_covariates, b.tte_covariates)


def test_time_scale_days(small_sim):
    long_df, ev_df, _ = dataset_to_frames(small_sim.dataset)
    long_df["visit_time"] *= 365.25
    ev_df["event_time"] *= 365.25
    back = ingest_dataset(long_df, ev_df, time_scale=1 / 365.25)
    assert np.allclose(back[0].visit_times, small_sim.dataset[0].visit_times)


def test_split_by_arm(small_sim):
    ds = small_sim.dataset
    a, b = ds.subset(range(10)), ds.subset(range(10, 25))
    long_df, ev_df = concat_datasets([("x", a), ("y", b)])
    arms = ingest_dataset(long_df, ev_df, {"arm": "arm"}, split_by_arm=True)
    assert set(arms) == {"x", "y"} and arms["x"].n == 10 and arms["y"].n == 15
    with pytest.raises(ValidationError, match="arm"):
        ingest_dataset(long_df, ev_df, split_by_arm=True)


def test_ingest_errors(tmp_path):
    long_df = pd.DataFrame({"subject_id": ["a", "a", "b"], "visit_time": [0.1, 0.2, 0.1], "y": [0, 1, 2],
                            "x1": [1.0, 1.0, 2.0]})
    ev = pd.DataFrame({"subject_id": ["a"], "event_time": [1.0], "event": [1], "w1": [0.0]})
    with pytest.raises(LinkageError, match="b"):
        ingest_dataset(long_df, ev)
    ev2 = pd.DataFrame({"subject_id": ["a", "b"], "event_time": [1.0, 1.0], "event": [1, 2], "w1": [0.0, 0.0]})
    with pytest.raises(ParseError, match="0/1"):
        ingest_dataset(long_df, ev2)
    ev3 = ev2.assign(event=[1, 0])
    varying = long_df.assign(x1=[1.0, 3.0, 2.0])
    with pytest.raises(ValidationError, match="vary across visits"):
        ingest_dataset(varying, ev3)
    bad = long_df.assign(y=["0", "oops", "1"])
    with pytest.raises(ParseError, match="non-numeric"):
        ingest_dataset(bad, ev3)
    with pytest.raises(FileNotFoundError):
        ingest_dataset(tmp_path / "missing.csv", ev3)
    ok = ingest_dataset(long_df, ev3)
    assert ok.n == 2 and ok.dims == (1, 1, 1)


def test_schema_file(tmp_path):
    p = tmp_path / "schema.json"
    p.write_text(json.dumps({"outcome": "tb"}))
    assert load_schema(p)["outcome"] == "tb"
    p.write_text(json.dumps({"nonsense": "tb"}))
    with pytest.raises(ValidationError, match="unknown schema"):
        load_schema(p)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0.01, 5.0), min_size=1, max_size=8, unique=True),
       st.floats(0.0, 3.0))
def test_subject_accepts_any_sorted_visits_before_event(times, slack):
    s = np.sort(np.array(times))
    sub = SubjectData("z", s, np.zeros_like(s), s[-1] + slack + 1e-9, False)
    assert sub.n_obs == s.size
