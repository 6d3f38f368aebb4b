import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from akitraj._util import DAY, to_epoch
from akitraj.baseline import CkdStatus, back_calculate_scr
from akitraj.outcomes import (
    SurvivalRecord,
    build_survival_records,
    derive_mortality,
    derive_readmission_and_renal,
    survival_time,
)

ADMIT = to_epoch("2020-03-01T08:00:00")
DISCHARGE = to_epoch("2020-03-06T12:00:00")
NO_CKD = {90: CkdStatus("no"), 365: CkdStatus("no")}


def _renal(**kw):
    args = dict(discharge=DISCHARGE, later_admits=[], later_encounter_ids=[], krt_code_dates=[], index_krt=False,
                index_ckd_present="no", ckd_at=NO_CKD, index_egfr=None, followup_creatinine=[], age=60.0,
                sex="female", trajectory_by_encounter={})
    args.update(kw)
    return derive_readmission_and_renal(**args)


def test_death_ten_days_after_discharge():
    m = derive_mortality(ADMIT, DISCHARGE, "home/rehab", DISCHARGE + 10 * DAY)
    assert not m["hospital_death"]
    assert m["death_30d_after_discharge"] is True
    assert m["mortality_365d"] is True


def test_expired_without_death_date():
    m = derive_mortality(ADMIT, DISCHARGE, "expired", None)
    assert m["hospital_death"]
    assert m["death_30d_after_discharge"] is None
    assert m["mortality_30d"]


def test_death_before_admission_is_a_data_error():
    m = derive_mortality(ADMIT, DISCHARGE, "home/rehab", ADMIT - 5 * DAY)
    assert m["data_error"] == "death-before-admission"
    assert not m["hospital_death"] and not m["mortality_1095d"]


def test_anchor_changes_horizon():
    death = ADMIT + 33 * DAY  # 28 days after discharge
    assert not derive_mortality(ADMIT, DISCHARGE, "home/rehab", death, "admission")["mortality_30d"]
    assert derive_mortality(ADMIT, DISCHARGE, "home/rehab", death, "discharge")["mortality_30d"]
    with pytest.raises(ValueError):
        derive_mortality(ADMIT, DISCHARGE, "home/rehab", None, "first-lab")


def test_survival_time_examples():
    assert survival_time(DISCHARGE, DISCHARGE + 400 * DAY, DISCHARGE) == (400.0, True)
    assert survival_time(DISCHARGE, None, DISCHARGE + 500 * DAY) == (500.0, False)
    assert survival_time(DISCHARGE, DISCHARGE + 1200 * DAY, DISCHARGE) == (1095.0, False)
    assert survival_time(DISCHARGE, None, DISCHARGE + 200 * DAY) == (200.0, False)
    assert survival_time(DISCHARGE, None, DISCHARGE + 900 * DAY, admin_end=DISCHARGE + 300 * DAY) == (300.0, False)


def test_readmission_windows_and_trajectory():
    out = _renal(later_admits=[DISCHARGE + 25 * DAY, DISCHARGE + 80 * DAY], later_encounter_ids=["E2", "E3"],
                 trajectory_by_encounter={"E2": "rapidly-reversed"})
    assert out["readmit_30d"] and out["readmit_90d"] and out["readmit_365d"]
    assert out["readmit_30d_trajectory"] == "rapidly-reversed"
    out = _renal(later_admits=[DISCHARGE + 40 * DAY], later_encounter_ids=["E2"])
    assert not out["readmit_30d"] and out["readmit_90d"]
    assert out["readmit_30d_trajectory"] is None


def test_new_krt_window_and_index_krt_denominator():
    out = _renal(krt_code_dates=[(DISCHARGE // DAY + 50) * DAY])
    assert out["new_krt_90d"] and out["new_krt_365d"]
    assert _renal(krt_code_dates=[DISCHARGE + 200 * DAY])["new_krt_90d"] is False
    out = _renal(index_krt=True, krt_code_dates=[DISCHARGE + 20 * DAY])
    assert out["new_krt_90d"] is None and out["new_krt_365d"] is None


def test_ckd_outcome_denominators():
    out = _renal(ckd_at={90: CkdStatus("no"), 365: CkdStatus("yes", basis="codes")})
    assert out["new_ckd_90d"] is False and out["new_ckd_365d"] is True
    assert out["ckd_progression_365d"] is None
    out = _renal(index_ckd_present="yes", index_egfr=70.0)
    assert out["new_ckd_90d"] is None and out["new_ckd_365d"] is None


def test_ckd_progression_g2_to_g3b():
    scr = back_calculate_scr(40.0, 60, "female")
    out = _renal(index_ckd_present="yes", index_egfr=70.0, followup_creatinine=[(DISCHARGE + 200 * DAY, scr)])
    assert out["followup_g_stage"] == "G3b"
    assert out["ckd_progression_365d"] is True
    same = back_calculate_scr(65.0, 60, "female")
    out = _renal(index_ckd_present="yes", index_egfr=70.0, followup_creatinine=[(DISCHARGE + 200 * DAY, same)])
    assert out["ckd_progression_365d"] is False


def test_survival_record_invariants():
    with pytest.raises(ValueError):
        SurvivalRecord("x", -1.0, False)
    with pytest.raises(ValueError):
        SurvivalRecord("x", 1.0, False, weight=0.0)
    with pytest.raises(ValueError):
        SurvivalRecord("x", 1.0, False, covariates=(float("nan"),))


def test_build_survival_records_skips_hospital_deaths():
    frame = pd.DataFrame({"encounter_id": ["A", "B", "C"], "surv_time": [10.0, None, 1095.0],
                          "surv_event": [True, None, False], "cci": [1, 2, 3]})
    recs = build_survival_records(frame, ["cci"])
    assert [r.record_id for r in recs] == ["A", "C"]
    assert recs[0].covariates == (1.0,) and recs[0].event


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 20), st.one_of(st.none(), st.integers(-3, 2000)), st.integers(0, 3000),
       st.sampled_from(["home/rehab", "expired", "unknown"]), st.sampled_from(["admission", "discharge"]))
def test_mortality_and_survival_properties(stay, death_day, last_day, disposition, anchor):
    discharge = ADMIT + stay * DAY
    death = None if death_day is None else discharge + death_day * DAY
    m = derive_mortality(ADMIT, discharge, disposition, death, anchor)
    # horizon nesting
    assert m["mortality_30d"] <= m["mortality_365d"] <= m["mortality_1095d"]
    assert (m["death_30d_after_discharge"] is None) == m["hospital_death"]
    if not m["hospital_death"]:
        t, ev = survival_time(discharge, m["death_time"], discharge + last_day * DAY)
        assert 0 <= t <= 1095
        if ev:
            assert m["mortality_1095d"] or anchor == "admission"
