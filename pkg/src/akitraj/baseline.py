"""Kidney baseline: CKD-EPI 2021 eGFR, reference creatinine cascade, CKD status.

The eGFR equation is the race-free CKD-EPI creatinine refit (Inker et al.,
NEJM 2021)::

    eGFR = 142 * min(Scr/k, 1)^a * max(Scr/k, 1)^-1.200 * 0.9938^age * 1.012[female]

with k = 0.7 (F) / 0.9 (M) and a = -0.241 (F) / -0.302 (M).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from ._util import DAY, EPS, check_finite_positive

# Frozen constants; bump the version if any value changes.
CKD_EPI_2021 = {
    "version": "ckd-epi-2021-creatinine",
    "numerator": 142.0,
    "kappa": {"female": 0.7, "male": 0.9},
    "alpha": {"female": -0.241, "male": -0.302},
    "upper_exponent": -1.200,
    "age_base": 0.9938,
    "female_factor": 1.012,
}

ASSUMED_BASELINE_EGFR = 75.0
SCR_BRACKET = (0.01, 50.0)

REFERENCE_METHODS = (
    "admission",
    "min-prior-7d",
    "median-prior-8-365d",
    "estimated-ckdepi",
    "first-creatinine",
)

G_STAGES = ("G1", "G2", "G3a", "G3b", "G4", "G5")
_G_ORDER = {g: i for i, g in enumerate(G_STAGES)}

CKD_BASES = ("medical-history", "creatinine-criteria", "post-transplant", "none")
AKD_STATES = ("none", "recovered-recent-AKI", "non-recovered-recent-AKI")

PRIOR_SHORT_DAYS = 7
PRIOR_LONG_DAYS = 365
ADMISSION_WINDOW_HOURS = 24
CKD_EGFR_THRESHOLD = 60.0
CKD_CHRONICITY_DAYS = 90
RECENT_AKI_DAYS = 90


def _sex_key(sex: str) -> str:
    s = str(sex).strip().lower()
    if s in ("f", "female", "woman"):
        return "female"
    if s in ("m", "male", "man"):
        return "male"
    raise ValueError(f"sex must be male or female, got {sex!r}")


def _check_age(age: float) -> float:
    age = float(age)
    if not (18 <= age <= 120):
        raise ValueError(f"age must be within [18, 120] years, got {age}")
    return age


@dataclass(frozen=True)
class EgfrResult:
    egfr: float
    scr: float
    age: float
    sex: str


def _egfr(scr: float, age: float, sex: str) -> float:
    c = CKD_EPI_2021
    k = c["kappa"][sex]
    ratio = scr / k
    value = (
        c["numerator"]
        * min(ratio, 1.0) ** c["alpha"][sex]
        * max(ratio, 1.0) ** c["upper_exponent"]
        * c["age_base"] ** age
    )
    if sex == "female":
        value *= c["female_factor"]
    return value


def ckd_epi_egfr(scr: float, age: float, sex: str) -> EgfrResult:
    """eGFR in mL/min/1.73 m^2 from serum creatinine (mg/dL), age and sex."""
    scr = check_finite_positive(scr, "scr")
    age = _check_age(age)
    sex = _sex_key(sex)
    return EgfrResult(egfr=_egfr(scr, age, sex), scr=scr, age=age, sex=sex)


def back_calculate_scr(target_egfr: float, age: float, sex: str) -> float:
    """Creatinine that yields ``target_egfr`` under the 2021 equation.

    Solved by bracketed root finding on log-eGFR over the plausible
    creatinine range; raises ``ValueError`` if the target lies outside it.
    """
    target = check_finite_positive(target_egfr, "target_egfr")
    age = _check_age(age)
    sex = _sex_key(sex)
    lo, hi = SCR_BRACKET
    log_target = math.log(target)

    def f(scr):
        return math.log(_egfr(scr, age, sex)) - log_target

    f_lo, f_hi = f(lo), f(hi)
    if f_lo < 0 or f_hi > 0:
        raise ValueError(
            f"eGFR {target} is unattainable for creatinine in {SCR_BRACKET} (age {age}, {sex})"
        )
    if f_lo == 0:
        return lo
    if f_hi == 0:
        return hi
    return brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


def assign_g_stage(egfr: float) -> str:
    """KDIGO G category; lower bounds are inclusive (90 -> G1, 60 -> G2, ...)."""
    egfr = check_finite_positive(egfr, "egfr")
    if egfr >= 90:
        return "G1"
    if egfr >= 60:
        return "G2"
    if egfr >= 45:
        return "G3a"
    if egfr >= 30:
        return "G3b"
    if egfr >= 15:
        return "G4"
    return "G5"


def g_stage_rank(stage: str) -> int:
    """0 for G1 ... 5 for G5; larger is worse."""
    return _G_ORDER[stage]


@dataclass(frozen=True)
class ReferenceCreatinine:
    value: float
    method: str
    anchor: int  # epoch seconds at which the reference is taken to hold

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError("reference creatinine must be positive")
        if self.method not in REFERENCE_METHODS:
            raise ValueError(f"unknown reference method {self.method!r}")


@dataclass(frozen=True)
class CkdStatus:
    present: str  # "yes" | "no" | "insufficient-data"
    basis: str = "none"
    g_stage: str = "unstaged"
    akd_state: str = "none"
    egfr: float | None = None

    def __post_init__(self):
        if self.present not in ("yes", "no", "insufficient-data"):
            raise ValueError(f"bad CKD presence {self.present!r}")
        if (self.basis == "none") != (self.present != "yes"):
            raise ValueError("basis must be 'none' exactly when CKD is not present")

    def with_stage(self, egfr: float | None) -> "CkdStatus":
        stage = assign_g_stage(egfr) if egfr is not None else "unstaged"
        return CkdStatus(self.present, self.basis, stage, self.akd_state, egfr)


def determine_reference_creatinine(
    admit: int,
    history_times: Sequence[int],
    history_values: Sequence[float],
    series_times: Sequence[int],
    series_values: Sequence[float],
    ckd: CkdStatus,
    age: float,
    sex: str,
) -> ReferenceCreatinine:
    """Reference creatinine by the five-step cascade.

    ``history_*`` are the patient's creatinine measurements strictly before
    admission (any order); ``series_*`` the encounter's time-sorted in-stay
    series. Priority: minimum in the 7 days before admission, median over
    days 8-365 before admission, earliest value within 24 h of admission,
    back-calculation at eGFR 75 (only when CKD is not present), first
    in-stay value.
    """
    short_start = admit - PRIOR_SHORT_DAYS * DAY
    long_start = admit - PRIOR_LONG_DAYS * DAY
    short_vals, short_times = [], []
    long_vals = []
    for t, v in zip(history_times, history_values):
        if short_start <= t < admit:
            short_vals.append(v)
            short_times.append(t)
        elif long_start <= t < short_start:
            long_vals.append(v)
    if short_vals:
        i = min(range(len(short_vals)), key=lambda k: (short_vals[k], short_times[k]))
        return ReferenceCreatinine(float(short_vals[i]), "min-prior-7d", int(short_times[i]))
    if long_vals:
        return ReferenceCreatinine(float(np.median(long_vals)), "median-prior-8-365d", int(admit))

    admission_end = admit + ADMISSION_WINDOW_HOURS * 3600
    for t, v in zip(series_times, series_values):
        if admit <= t <= admission_end:
            return ReferenceCreatinine(float(v), "admission", int(t))
        if t > admission_end:
            break
    if ckd.present != "yes":
        value = back_calculate_scr(ASSUMED_BASELINE_EGFR, max(18.0, min(age, 120.0)), sex)
        return ReferenceCreatinine(value, "estimated-ckdepi", int(admit))
    if len(series_values) == 0:
        raise ValueError("encounter has no creatinine to anchor a reference")
    return ReferenceCreatinine(float(series_values[0]), "first-creatinine", int(series_times[0]))


def _meets_aki_rise(value: float, baseline: float) -> bool:
    return value - baseline >= 0.3 - EPS or value / baseline >= 1.5 - EPS


def identify_ckd(
    admit: int,
    ckd_code_times: Sequence[int],
    transplant_code_times: Sequence[int],
    aki_code_times: Sequence[int],
    any_code_count: int,
    history_times: Sequence[int],
    history_values: Sequence[float],
    age: float,
    sex: str,
) -> CkdStatus:
    """Preadmission CKD status.

    Code-time arguments are the dates (epoch seconds) of matching codes;
    only those strictly before ``admit`` are considered. ``any_code_count``
    is the number of preadmission diagnosis/procedure codes of any kind,
    used to distinguish "no" from "insufficient-data".
    """
    prior_ckd = any(t < admit for t in ckd_code_times)
    prior_tx = any(t < admit for t in transplant_code_times)
    hist = sorted((t, v) for t, v in zip(history_times, history_values) if t < admit)

    if prior_ckd:
        present, basis = "yes", "medical-history"
    elif _ckd_by_creatinine(hist, age, sex):
        present, basis = "yes", "creatinine-criteria"
    elif prior_tx:
        present, basis = "yes", "post-transplant"
    elif not hist and any_code_count == 0:
        present, basis = "insufficient-data", "none"
    else:
        present, basis = "no", "none"

    akd = "none"
    recent_start = admit - RECENT_AKI_DAYS * DAY
    if any(recent_start <= t < admit for t in aki_code_times):
        akd = "recovered-recent-AKI"
        if len(hist) >= 2:
            latest_t, latest_v = hist[-1]
            window = [v for t, v in hist[:-1] if t >= latest_t - PRIOR_LONG_DAYS * DAY]
            if window and _meets_aki_rise(latest_v, min(window)):
                akd = "non-recovered-recent-AKI"
    return CkdStatus(present, basis, "unstaged", akd)


def _ckd_by_creatinine(hist, age: float, sex: str) -> bool:
    """Two reduced-eGFR (<60) measurements at least 90 days apart."""
    if len(hist) < 2:
        return False
    age = max(18.0, min(float(age), 120.0))
    sex = _sex_key(sex)
    reduced = [t for t, v in hist if v > 0 and _egfr(v, age, sex) < CKD_EGFR_THRESHOLD]
    return len(reduced) >= 2 and reduced[-1] - reduced[0] >= CKD_CHRONICITY_DAYS * DAY
