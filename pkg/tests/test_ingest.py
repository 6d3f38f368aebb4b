import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from akitraj._util import HOUR, to_epoch
from akitraj.ingest import (
    IngestConfig,
    IngestError,
    apply_cohort_filters,
    creatinine_series,
    load_cohort,
)
from cdm import adult, write_cdm


def _load(root, **kw):
    return load_cohort(IngestConfig.from_dict(kw, base_dir=root))


def _basic(tmp_path, labs, encounters=None, patients=None, **kw):
    encounters = encounters or [("E1", "P1", "2020-03-01T08:00:00", "2020-03-05T08:00:00", "HO")]
    return write_cdm(tmp_path, patients=patients or [adult()], encounters=encounters, labs=labs, **kw)


def test_three_lab_rows_load_without_errors(tmp_path):
    labs = [("P1", 0.9, "mg/dL", f"2020-03-0{d}T09:00:00") for d in (1, 2, 3)]
    store = _load(_basic(tmp_path, labs))
    assert len(store.labs) == 3
    assert store.errors["total"] == 0


def test_negative_creatinine_dropped_and_counted(tmp_path):
    labs = [("P1", v, "mg/dL", f"2020-03-0{d}T09:00:00") for d, v in ((1, 0.9), (2, -1.0), (3, 1.0))]
    store = _load(_basic(tmp_path, labs), error_tolerance=0.5)
    assert len(store.labs) == 2
    assert store.errors["counts"]["lab"] == {"implausible-creatinine": 1}
    assert store.errors["samples"][0]["value"] == "-1.0"


def test_umol_converted(tmp_path):
    store = _load(_basic(tmp_path, [("P1", 88.42, "umol/L", "2020-03-01T09:00:00")]))
    assert store.labs["value"].iloc[0] == pytest.approx(1.0)


def test_load_is_deterministic(tmp_path):
    labs = [("P1", 1.2, "mg/dL", "2020-03-02T09:00:00"), ("P1", 1.0, "mg/dL", "2020-03-01T09:00:00")]
    root = _basic(tmp_path, labs, dx=[("P1", "I50.9", "10", "2019-06-01")])
    assert _load(root).serialize() == _load(root).serialize()


def test_parse_failures_above_tolerance_abort(tmp_path):
    labs = [("P1", 0.9, "mg/dL", "2020-03-01T09:00:00"), ("P1", 0.9, "mg/dL", "not-a-date")]
    root = _basic(tmp_path, labs)
    with pytest.raises(IngestError) as err:
        _load(root)
    assert err.value.kind == "data"
    store = _load(root, error_tolerance=0.5)
    assert store.errors["counts"]["lab"] == {"timestamp": 1}


def test_missing_mapped_column_is_config_error(tmp_path):
    root = _basic(tmp_path, [("P1", 0.9, "mg/dL", "2020-03-01T09:00:00")])
    with pytest.raises(IngestError) as err:
        _load(root, tables={"lab": {"columns": {"value": "NO_SUCH_COLUMN"}}})
    assert err.value.kind == "config"


def test_missing_file(tmp_path):
    root = _basic(tmp_path, [])
    (root / "LAB_RESULT_CM.csv").unlink()
    with pytest.raises(IngestError):
        _load(root)


def test_unknown_patient_events_are_tallied(tmp_path):
    labs = [("P1", 0.9, "mg/dL", "2020-03-01T09:00:00"), ("P9", 0.9, "mg/dL", "2020-03-01T09:00:00")]
    store = _load(_basic(tmp_path, labs))
    assert len(store.labs) == 1
    assert store.errors["counts"]["lab"] == {"unknown-patient": 1}


def test_age_17_excluded_and_later_adult_admission_kept(tmp_path):
    encounters = [
        ("E1", "P1", "2020-03-01T08:00:00", "2020-03-03T08:00:00", "HO"),  # one day before 18th birthday
        ("E2", "P1", "2021-03-01T08:00:00", "2021-03-03T08:00:00", "HO"),
    ]
    labs = [("P1", 0.8, "mg/dL", "2020-03-01T10:00:00"), ("P1", 0.8, "mg/dL", "2021-03-01T10:00:00")]
    store = _load(_basic(tmp_path, labs, encounters, [adult(birth="2002-03-02")]))
    kept, tally = apply_cohort_filters(store)
    assert kept.encounters["encounter_id"].tolist() == ["E2"]
    assert tally["excluded"] == {"age": 1, "no-creatinine": 0}


def test_creatinine_window_boundaries(tmp_path):
    # short stays: a lab at admit+47h lies after discharge but inside the 48h window
    encounters = [
        ("E1", "P1", "2020-03-01T08:00:00", "2020-03-01T20:00:00", "HO"),
        ("E2", "P2", "2020-03-01T08:00:00", "2020-03-01T20:00:00", "HO"),
        ("E3", "P3", "2020-03-01T08:00:00", "2020-03-01T20:00:00", "HO"),
        ("E4", "P4", "2020-03-01T08:00:00", "2020-03-01T20:00:00", "HO"),
    ]
    labs = [("P1", 0.8, "mg/dL", "2020-03-03T07:00:00"), ("P2", 0.8, "mg/dL", "2020-03-03T08:00:00"),
            ("P3", 0.8, "mg/dL", "2020-03-03T09:00:00")]
    patients = [adult(p) for p in ("P1", "P2", "P3", "P4")]
    kept, tally = apply_cohort_filters(_load(_basic(tmp_path, labs, encounters, patients)))
    assert kept.encounters["encounter_id"].tolist() == ["E1", "E2"]
    assert tally["excluded"] == {"age": 0, "no-creatinine": 2}
    assert tally["included"] + sum(tally["excluded"].values()) == tally["loaded"]


def test_creatinine_series_sorted_with_max_on_ties(tmp_path):
    labs = [("P1", 1.2, "mg/dL", "2020-03-02T09:00:00"), ("P1", 1.0, "mg/dL", "2020-03-01T09:00:00"),
            ("P1", 1.3, "mg/dL", "2020-03-01T09:00:00")]
    store = _load(_basic(tmp_path, labs))
    s = creatinine_series(store.encounter("E1"))
    assert list(s.values) == [1.3, 1.2]
    assert np.all(np.diff(s.times) > 0)


def test_one_point_series_after_discharge_inside_window(tmp_path):
    encounters = [("E1", "P1", "2020-03-01T08:00:00", "2020-03-01T09:00:00", "HO")]
    store = _load(_basic(tmp_path, [("P1", 0.9, "mg/dL", "2020-03-01T18:00:00")], encounters))
    s = creatinine_series(store.encounter("E1"))
    assert len(s.values) == 1 and s.times[0] == to_epoch("2020-03-01T08:00:00") + 10 * HOUR


def test_dispositions_and_code_normalization(tmp_path):
    encounters = [("E1", "P1", "2020-03-01T08:00:00", "2020-03-05T08:00:00", "EX")]
    root = _basic(tmp_path, [("P1", 0.9, "mg/dL", "2020-03-01T09:00:00")], encounters,
                  px=[("P1", "96.72", "09", "2020-03-02")])
    store = _load(root)
    assert store.encounters["disposition"].tolist() == ["expired"]
    assert store.codes["code"].tolist() == ["9672"]
    assert store.codes["system"].tolist() == ["ICD9"]


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(10, 30), st.integers(0, 6), st.integers(-2, 72)), min_size=1, max_size=12))
def test_filters_idempotent_and_conserving(tmp_path_factory, spec):
    root = tmp_path_factory.mktemp("cdm")
    patients, encounters, labs = [], [], []
    for i, (age, stay_days, lab_hour) in enumerate(spec):
        pid = f"P{i}"
        patients.append(adult(pid, birth=f"{2020 - age}-06-01"))
        encounters.append((f"E{i}", pid, "2020-03-01T08:00:00", f"2020-03-{1 + stay_days:02d}T20:00:00", "HO"))
        if lab_hour >= 0:
            labs.append((pid, 1.0, "mg/dL", f"2020-03-0{1 + (8 + lab_hour) // 24}T{(8 + lab_hour) % 24:02d}:00:00"))
    store = _load(write_cdm(root, patients, encounters, labs))
    once, tally = apply_cohort_filters(store)
    twice, tally2 = apply_cohort_filters(once)
    assert once.encounters.equals(twice.encounters)
    assert tally["included"] + sum(tally["excluded"].values()) == tally["loaded"] == len(spec)
    assert sum(tally2["excluded"].values()) == 0
