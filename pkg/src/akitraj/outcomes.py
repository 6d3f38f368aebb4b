"""Mortality, readmission and renal outcomes, and censored survival records.

Death dates have day resolution. A death dated on or between the admission
and discharge days is a hospital death; horizons are counted in whole
calendar days from the anchor date.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from ._util import DAY, day_floor, days_between
from .baseline import assign_g_stage, ckd_epi_egfr, g_stage_rank, identify_ckd

MORTALITY_HORIZONS = (30, 365, 1095)
READMISSION_HORIZONS = (30, 90, 365)
RENAL_HORIZONS = (90, 365)
SURVIVAL_HORIZON_DAYS = 1095
DEATH_AFTER_DISCHARGE_DAYS = 30


@dataclass(frozen=True)
class SurvivalRecord:
    record_id: str
    time: float  # days from discharge
    event: bool
    weight: float = 1.0
    covariates: tuple = ()

    def __post_init__(self):
        if not self.time >= 0:
            raise ValueError("survival time must be nonnegative")
        if not self.weight > 0:
            raise ValueError("weight must be positive")
        if not all(math.isfinite(c) for c in self.covariates):
            raise ValueError("covariates must be finite")


def derive_mortality(admit: int, discharge: int, disposition: str, death: int | None,
                     anchor: str = "admission") -> dict:
    """Hospital mortality, anchored horizon mortality and death within 30 d of discharge.

    ``death_30d_after_discharge`` is None for hospital deaths: the measure
    is defined among survivors only. A death dated before admission is
    reported through ``data_error`` and otherwise ignored.
    """
    if anchor not in ("admission", "discharge"):
        raise ValueError(f"unknown mortality anchor {anchor!r}")
    out = {"data_error": None}
    if death is not None and day_floor(death) < day_floor(admit):
        out["data_error"] = "death-before-admission"
        death = None
    hospital = disposition == "expired" or (death is not None and day_floor(death) <= day_floor(discharge))
    if hospital and death is None:
        death = discharge
    out["hospital_death"] = bool(hospital)
    out["death_time"] = death
    ref = admit if anchor == "admission" else discharge
    for h in MORTALITY_HORIZONS:
        out[f"mortality_{h}d"] = death is not None and days_between(ref, death) <= h
    if hospital:
        out["death_30d_after_discharge"] = None
    else:
        out["death_30d_after_discharge"] = death is not None and days_between(discharge, death) <= DEATH_AFTER_DISCHARGE_DAYS
    return out


def derive_readmission_and_renal(
    discharge: int,
    later_admits: Sequence[int],
    later_encounter_ids: Sequence[str],
    krt_code_dates: Sequence[int],
    index_krt: bool,
    index_ckd_present: str,
    ckd_at: dict,
    index_egfr: float | None,
    followup_creatinine: Sequence[tuple],
    age: float,
    sex: str,
    trajectory_by_encounter: dict,
) -> dict:
    """Remaining outcome fields for one index encounter.

    ``later_admits`` are admissions of the same patient after this
    discharge (any order). ``krt_code_dates`` are the patient's KRT code
    dates. ``ckd_at`` maps each renal horizon H to the CkdStatus evaluated
    at discharge + H days. ``followup_creatinine`` holds ``(time, value)``
    measurements after discharge.
    """
    out = {}
    gaps = sorted((a - discharge, eid) for a, eid in zip(later_admits, later_encounter_ids) if a > discharge)
    for h in READMISSION_HORIZONS:
        out[f"readmit_{h}d"] = any(g <= h * DAY for g, _ in gaps)
    first_30 = next((eid for g, eid in gaps if g <= 30 * DAY), None)
    out["readmit_30d_trajectory"] = (
        None if first_30 is None else trajectory_by_encounter.get(first_30, "not-phenotyped")
    )

    dday = day_floor(discharge)
    for h in RENAL_HORIZONS:
        if index_krt:
            out[f"new_krt_{h}d"] = None
        else:
            out[f"new_krt_{h}d"] = any(dday < t <= discharge + h * DAY for t in krt_code_dates)
        if index_ckd_present == "yes":
            out[f"new_ckd_{h}d"] = None
        else:
            out[f"new_ckd_{h}d"] = ckd_at[h].present == "yes"

    out["ckd_progression_365d"] = None
    out["followup_g_stage"] = None
    if index_ckd_present == "yes" and index_egfr is not None:
        window = [(t, v) for t, v in followup_creatinine if discharge < t <= discharge + 365 * DAY]
        if window:
            t, v = max(window)
            stage = assign_g_stage(ckd_epi_egfr(v, age, sex).egfr)
            out["followup_g_stage"] = stage
            out["ckd_progression_365d"] = g_stage_rank(stage) > g_stage_rank(assign_g_stage(index_egfr))
    return out


def survival_time(discharge: int, death: int | None, last_activity: int,
                  horizon_days: int = SURVIVAL_HORIZON_DAYS, admin_end: int | None = None) -> tuple[float, bool]:
    """(days from discharge, event) with censoring at the horizon or end of follow-up."""
    if death is not None:
        d = days_between(discharge, death)
        if d <= horizon_days:
            return float(max(d, 0)), True
    end = admin_end if admin_end is not None else last_activity
    follow = max(0, days_between(discharge, max(end, discharge)))
    if death is not None:
        # alive at least until the horizon when death lies beyond it
        follow = max(follow, horizon_days)
    return float(min(horizon_days, follow)), False


def build_survival_records(frame: pd.DataFrame, covariates: Sequence[str] = (), weights=None,
                           id_col: str = "encounter_id") -> list[SurvivalRecord]:
    """SurvivalRecords from an outcome frame with ``surv_time``/``surv_event`` columns.

    Hospital deaths carry no survival time and are skipped.
    """
    rows = frame[frame["surv_time"].notna()]
    w = np.ones(len(rows)) if weights is None else np.asarray(weights, float)[frame["surv_time"].notna().to_numpy()]
    X = rows[list(covariates)].to_numpy(float) if covariates else np.zeros((len(rows), 0))
    return [
        SurvivalRecord(str(i), float(t), bool(e), float(wi), tuple(x))
        for i, t, e, wi, x in zip(rows[id_col], rows["surv_time"], rows["surv_event"], w, X)
    ]


def covariate_frame(frame: pd.DataFrame) -> pd.DataFrame:
    """Model covariates: age over 65, female, African American, CCI, ventilation, ICU."""
    return pd.DataFrame({
        "age_over_65": (frame["age"] > 65).astype(float),
        "female": (frame["sex"] == "female").astype(float),
        "race_aa": frame["race_aa"].astype(float),
        "cci": frame["cci"].astype(float),
        "vent": frame["vent"].astype(float),
        "icu": frame["icu"].astype(float),
    }, index=frame.index)


def derive_outcomes(store, encounters: pd.DataFrame, results: pd.DataFrame, code_index,
                    anchor: str = "admission", admin_end: int | None = None) -> pd.DataFrame:
    """Outcome rows for every phenotyped encounter.

    ``results`` must be aligned with ``encounters`` and carry ``krt``,
    ``ckd_present``, ``reference_creatinine``, ``age``, ``sex`` and
    ``trajectory_group``.
    """
    from .ingest import event_keys, patient_index

    far = -(1 << 32)
    n = len(encounters)
    deaths = dict(zip(store.deaths["patient_id"], store.deaths["death"].astype(np.int64)))
    traj = dict(zip(results["encounter_id"], results["trajectory_group"]))
    last_activity = patient_last_activity(store)

    pidx = patient_index(store, encounters["patient_id"])
    pidx_next = pidx + 1
    farv = np.full(n, far, np.int64)
    admits = encounters["admit"].to_numpy(np.int64)
    discharges = encounters["discharge"].to_numpy(np.int64)

    allenc = store.all_encounters
    ap = patient_index(store, allenc["patient_id"])
    at = allenc["admit"].to_numpy(np.int64)
    order = np.lexsort((allenc["encounter_id"].to_numpy(), at, ap))
    akeys = event_keys(ap[order], at[order])
    a_admit, a_id = at[order], allenc["encounter_id"].to_numpy()[order]
    a_lo = np.searchsorted(akeys, event_keys(pidx, discharges + 1), side="left")
    a_hi = np.searchsorted(akeys, event_keys(pidx_next, farv), side="left")

    lab_keys = event_keys(patient_index(store, store.labs["patient_id"]), store.labs["time"].to_numpy())
    lab_t = store.labs["time"].to_numpy(np.int64)
    lab_v = store.labs["value"].to_numpy(float)
    l_lo = np.searchsorted(lab_keys, event_keys(pidx, farv), side="left")
    l_hi = np.searchsorted(lab_keys, event_keys(pidx_next, farv), side="left")

    cm = code_index.codemap
    bits = {k: cm.bit(k) for k in ("ckd", "transplant", "aki", "krt")}
    c_lo = np.searchsorted(code_index.code_keys, event_keys(pidx, farv), side="left")
    c_hi = np.searchsorted(code_index.code_keys, event_keys(pidx_next, farv), side="left")
    cdates, cmasks = code_index.code_dates, code_index.code_masks

    res_krt = results["krt"].to_numpy(bool)
    res_ckd = results["ckd_present"].to_numpy()
    res_ref = results["reference_creatinine"].to_numpy(float)
    res_age = results["age"].to_numpy(float)
    res_sex = results["sex"].to_numpy()
    e_ids = encounters["encounter_id"].to_numpy()
    e_pid = encounters["patient_id"].to_numpy()
    e_disp = encounters["disposition"].to_numpy()

    rows = []
    for i in range(n):
        admit, discharge = int(admits[i]), int(discharges[i])
        m = derive_mortality(admit, discharge, e_disp[i], deaths.get(e_pid[i]), anchor)
        pt, pv = lab_t[l_lo[i]:l_hi[i]], lab_v[l_lo[i]:l_hi[i]]
        cd, cmask = cdates[c_lo[i]:c_hi[i]], cmasks[c_lo[i]:c_hi[i]]
        age, sex = float(res_age[i]), res_sex[i]

        ckd_at = {}
        if res_ckd[i] != "yes":
            for h in RENAL_HORIZONS:
                at_h = discharge + h * DAY
                k = int(np.searchsorted(cd, at_h, side="left"))
                dd, mm = cd[:k], cmask[:k]
                sel = pt < at_h
                ckd_at[h] = identify_ckd(at_h, dd[(mm & bits["ckd"]) != 0].tolist(),
                                         dd[(mm & bits["transplant"]) != 0].tolist(),
                                         dd[(mm & bits["aki"]) != 0].tolist(), k,
                                         pt[sel].tolist(), pv[sel].tolist(), age, sex)
        index_egfr = None
        if res_ckd[i] == "yes":
            index_egfr = ckd_epi_egfr(float(res_ref[i]), age, sex).egfr
        after = pt > discharge
        follow = list(zip(pt[after].tolist(), pv[after].tolist()))
        dday = day_floor(discharge)
        ksel = (cd > dday) & (cd < discharge + 366 * DAY) & ((cmask & bits["krt"]) != 0)
        rr = derive_readmission_and_renal(
            discharge, a_admit[a_lo[i]:a_hi[i]].tolist(), a_id[a_lo[i]:a_hi[i]].tolist(), cd[ksel].tolist(),
            bool(res_krt[i]), res_ckd[i], ckd_at, index_egfr, follow, age, sex, traj,
        )
        if m["hospital_death"]:
            st, ev = None, None
        else:
            st, ev = survival_time(discharge, m["death_time"], last_activity.get(e_pid[i], discharge),
                                   SURVIVAL_HORIZON_DAYS, admin_end)
        rows.append({
            "encounter_id": e_ids[i],
            "disposition": e_disp[i],
            **{k: v for k, v in m.items() if k != "death_time"},
            **rr,
            "surv_time": st,
            "surv_event": ev,
        })
    return pd.DataFrame(rows)


def patient_last_activity(store) -> dict:
    """Latest dated event per patient across labs, codes, medications and discharges."""
    parts = [
        store.labs[["patient_id", "time"]],
        store.codes[["patient_id", "date"]].rename(columns={"date": "time"}),
        store.meds[["patient_id", "time"]],
        store.all_encounters[["patient_id", "discharge"]].rename(columns={"discharge": "time"}),
    ]
    allev = pd.concat(parts, ignore_index=True)
    if allev.empty:
        return {}
    return allev.groupby("patient_id", sort=True)["time"].max().astype(np.int64).to_dict()
