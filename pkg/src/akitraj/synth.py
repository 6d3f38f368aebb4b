"""Deterministic synthetic cohorts in the PCORnet-style layout read by
:mod:`akitraj.ingest`, with the intended phenotype of every encounter.

Each encounter belongs to its own patient. A creatinine drawn three days
before admission fixes the reference value ``b``; in-stay creatinine is
sampled every 12 hours. Normal values lie in ``[b, 1.1 b]`` so neither the
ratio nor the 0.3 mg/dL rule can fire, and AKI values sit well inside the
ratio band of their stage:

* rapidly reversed: 1-4 elevated samples, so the first normal sample comes
  at most 48 h after onset;
* persistent: 5-10 elevated samples (first normal sample >= 60 h after
  onset), followed by 1-4 normal samples when recovered, none otherwise.

Death after discharge is exponential with a per-group daily hazard; the
competing censoring time is marked by an unrelated outpatient code.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from ._util import DAY, HOUR
from .engine import TRAJECTORY_GROUPS
from .outcomes import SURVIVAL_HORIZON_DAYS

STAGE_RATIO_BANDS = {1: (1.6, 1.9), 2: (2.1, 2.8), 3: (3.2, 4.5)}
NORMAL_SPREAD = 0.10
SAMPLE_HOURS = 12
REFERENCE_LEAD_DAYS = 3
FIRST_SAMPLE_HOURS = 2
RAPID_MAX_ELEVATED = 4
PERSISTENT_ELEVATED = (5, 10)
START_DATE = np.datetime64("2015-01-01T00:00:00", "s").astype(np.int64)

# single-category Charlson codes (ICD-10) with their weights
CHARLSON_CODES = {
    "congestive_heart_failure": ("I509", 1),
    "chronic_pulmonary": ("J449", 1),
    "diabetes": ("E119", 1),
    "peripheral_vascular": ("I739", 1),
    "dementia": ("F039", 1),
    "malignancy": ("C509", 2),
}
ICU_CPT = "99291"
FOLLOWUP_CODE = "Z0000"
NEPHROTOXIN_NAMES = ("vancomycin 1 g IV", "furosemide 40 mg IV", "lisinopril 10 mg PO", "ibuprofen 400 mg PO")


class GeneratorConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int = 0
    n: int = 1000
    # over TRAJECTORY_GROUPS; defaults give 14% AKI split 69/31 reversed/persistent
    prevalence: tuple = (0.86, 0.0966, 0.0217, 0.0217)
    severity_mix: tuple = (0.6, 0.25, 0.15)  # worst stage 1/2/3 among AKI
    hazard: tuple = (0.0002, 0.0004, 0.0007, 0.0012)  # per day after discharge
    hospital_mortality: tuple = (0.01, 0.02, 0.05, 0.10)
    censoring_rate: float = 0.0003  # per day
    age_range: tuple = (18.0, 90.0)
    female: float = 0.5
    race_aa: float = 0.15
    cci_category_prob: float = 0.12
    icu: float = 0.25
    nephrotoxin: float = 0.3
    baseline_range: tuple = (0.5, 1.3)  # reference creatinine, mg/dL

    def __post_init__(self):
        validate_generator_config(self)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "GeneratorConfig":
        raw = dict(raw or {})
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise GeneratorConfigError(f"unknown generator settings: {sorted(unknown)}")
        for k, v in raw.items():
            if isinstance(v, list):
                raw[k] = tuple(v)
        try:
            return cls(**raw)
        except TypeError as exc:
            raise GeneratorConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path) -> "GeneratorConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        return cls.from_dict(raw.get("synth", raw))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def _prob(x, name):
    if not (isinstance(x, (int, float)) and 0 <= x <= 1):
        raise GeneratorConfigError(f"{name} must be a probability, got {x!r}")


def _vector(v, k, name):
    if len(v) != k or not all(isinstance(x, (int, float)) and math.isfinite(x) for x in v):
        raise GeneratorConfigError(f"{name} needs {k} finite numbers")


def validate_generator_config(c: GeneratorConfig) -> None:
    if not isinstance(c.seed, int) or c.seed < 0:
        raise GeneratorConfigError("seed must be a nonnegative integer")
    if not isinstance(c.n, int) or c.n < 1:
        raise GeneratorConfigError("n must be a positive integer")
    K = len(TRAJECTORY_GROUPS)
    _vector(c.prevalence, K, "prevalence")
    _vector(c.hazard, K, "hazard")
    _vector(c.hospital_mortality, K, "hospital_mortality")
    _vector(c.severity_mix, 3, "severity_mix")
    if any(p < 0 for p in c.prevalence) or abs(sum(c.prevalence) - 1) > 1e-9:
        raise GeneratorConfigError("prevalence must be nonnegative and sum to 1")
    if any(h <= 0 for h in c.hazard):
        raise GeneratorConfigError("hazards must be positive")
    for p in c.hospital_mortality:
        _prob(p, "hospital_mortality")
    if any(p < 0 for p in c.severity_mix) or abs(sum(c.severity_mix) - 1) > 1e-9:
        raise GeneratorConfigError("severity_mix must be nonnegative and sum to 1")
    if not c.censoring_rate > 0:
        raise GeneratorConfigError("censoring_rate must be positive")
    lo, hi = c.age_range
    if not 18 <= lo <= hi <= 110:
        raise GeneratorConfigError("age_range must lie within [18, 110] (every encounter stays in the cohort)")
    for name in ("female", "race_aa", "cci_category_prob", "icu", "nephrotoxin"):
        _prob(getattr(c, name), name)
    blo, bhi = c.baseline_range
    if not 0.2 <= blo <= bhi <= 10:
        raise GeneratorConfigError("baseline_range must lie within [0.2, 10] mg/dL")


def allocate(n: int, p) -> np.ndarray:
    """Largest-remainder integer counts summing to n."""
    raw = np.asarray(p, float) * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


@dataclass
class SyntheticCohort:
    tables: dict  # file name -> DataFrame
    truth: pd.DataFrame
    config: GeneratorConfig
    files: dict = field(default_factory=dict)

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        digests = {}
        for name, df in list(self.tables.items()) + [("ground_truth.csv", self.truth)]:
            data = df.to_csv(index=False, lineterminator="\n").encode()
            (out / name).write_bytes(data)
            digests[name] = hashlib.sha256(data).hexdigest()
        self.files = digests
        return digests


def _iso(seconds) -> np.ndarray:
    return np.asarray(seconds, np.int64).astype("datetime64[s]").astype(str)


def _date(seconds) -> np.ndarray:
    return np.asarray(seconds, np.int64).astype("datetime64[s]").astype("datetime64[D]").astype(str)


def _in_stay_ratios(rng, group: int, stage: int) -> list:
    """Creatinine as multiples of the reference for one stay."""
    def normal(k):
        return list(1 + rng.uniform(0, NORMAL_SPREAD, k))

    def elevated(k):
        lo, hi = STAGE_RATIO_BANDS[stage]
        return list(rng.uniform(lo, hi, k))

    if group == 0:
        return normal(int(rng.integers(3, 15)))
    pre = normal(int(rng.integers(1, 4)))
    if group == 1:
        k = int(rng.integers(1, RAPID_MAX_ELEVATED + 1))
        return pre + elevated(k) + normal(int(rng.integers(1, 5)))
    k = int(rng.integers(PERSISTENT_ELEVATED[0], PERSISTENT_ELEVATED[1] + 1))
    post = normal(int(rng.integers(1, 5))) if group == 2 else []
    return pre + elevated(k) + post


def generate(config: GeneratorConfig) -> SyntheticCohort:
    """Build the input tables and the ground truth for ``config``."""
    rng = np.random.default_rng(config.seed)
    n = config.n
    groups = np.repeat(np.arange(len(TRAJECTORY_GROUPS)), allocate(n, config.prevalence))
    rng.shuffle(groups)
    stage = np.where(groups > 0, rng.choice([1, 2, 3], size=n, p=config.severity_mix), 0)

    ids = np.arange(1, n + 1)
    width = max(6, len(str(n)))
    pid = np.array([f"P{i:0{width}d}" for i in ids], dtype=object)
    eid = np.array([f"E{i:0{width}d}" for i in ids], dtype=object)
    age = rng.uniform(*config.age_range, n)
    female = rng.random(n) < config.female
    race = rng.random(n) < config.race_aa
    admit_day = START_DATE + rng.integers(0, 3 * 365, n) * DAY
    admit = admit_day + rng.integers(0, 24, n) * HOUR
    # born a fraction of a year after the birthday implied by age, never crossing it
    birth_day = admit_day - (np.floor(age) * 365.25 + 1).astype(np.int64) * DAY - rng.integers(0, 300, n) * DAY
    b = np.round(rng.uniform(*config.baseline_range, n), 2)

    lab_pid, lab_t, lab_v = [], [], []
    discharge = np.empty(n, np.int64)
    worst = np.zeros(n, int)
    for i in range(n):
        ratios = _in_stay_ratios(rng, int(groups[i]), int(stage[i]))
        t0 = int(admit[i]) + FIRST_SAMPLE_HOURS * HOUR
        times = t0 + np.arange(len(ratios)) * SAMPLE_HOURS * HOUR
        vals = np.round(b[i] * np.asarray(ratios), 2)
        if groups[i] > 0:
            worst[i] = stage[i]
        lab_pid.append(np.full(len(ratios) + 1, i))
        lab_t.append(np.r_[int(admit[i]) - REFERENCE_LEAD_DAYS * DAY, times])
        lab_v.append(np.r_[b[i], vals])
        discharge[i] = int(times[-1]) + int(rng.integers(2, 11)) * HOUR
    lab_pid = np.concatenate(lab_pid)
    lab_t = np.concatenate(lab_t)
    lab_v = np.concatenate(lab_v)

    hosp = rng.random(n) < np.asarray(config.hospital_mortality)[groups]
    haz = np.asarray(config.hazard)[groups]
    t_death = np.floor(rng.exponential(1 / haz)).astype(np.int64) + 1
    t_cens = np.floor(rng.exponential(1 / config.censoring_rate, n)).astype(np.int64) + 1
    dis_day = (discharge // DAY) * DAY
    dies_later = ~hosp & (t_death <= t_cens)
    censored = ~hosp & ~dies_later
    death_date = np.where(hosp, dis_day, dis_day + t_death * DAY)

    surv_time = np.where(dies_later, np.minimum(t_death, SURVIVAL_HORIZON_DAYS), np.minimum(t_cens,
                                                                                            SURVIVAL_HORIZON_DAYS))
    surv_event = dies_later & (t_death <= SURVIVAL_HORIZON_DAYS)

    # comorbidity history a month before admission
    dx_rows = []
    cci = np.zeros(n, int)
    for cat, (code, w) in CHARLSON_CODES.items():
        has = rng.random(n) < config.cci_category_prob
        cci += w * has
        dx_rows.append(pd.DataFrame({"PATID": pid[has], "DX": code, "DX_TYPE": "10",
                                     "DX_DATE": _date(admit_day[has] - 30 * DAY)}))
    dx_rows.append(pd.DataFrame({"PATID": pid[censored], "DX": FOLLOWUP_CODE, "DX_TYPE": "10",
                                 "DX_DATE": _date(dis_day[censored] + t_cens[censored] * DAY)}))
    icu = rng.random(n) < config.icu
    px = pd.DataFrame({"PATID": pid[icu], "PX": ICU_CPT, "PX_TYPE": "CH", "PX_DATE": _date(admit_day[icu])})
    tox = rng.random(n) < config.nephrotoxin
    med_name = np.asarray(NEPHROTOXIN_NAMES, dtype=object)[rng.integers(0, len(NEPHROTOXIN_NAMES), n)]
    med = pd.DataFrame({"PATID": pid[tox], "MEDADMIN_NAME": med_name[tox],
                        "MEDADMIN_START": _iso(admit[tox] + 6 * HOUR)})

    dead = hosp | dies_later
    tables = {
        "DEMOGRAPHIC.csv": pd.DataFrame({
            "PATID": pid, "BIRTH_DATE": _date(birth_day), "SEX": np.where(female, "F", "M"),
            "RACE": np.where(race, "03", "05"),
        }),
        "ENCOUNTER.csv": pd.DataFrame({
            "ENCOUNTERID": eid, "PATID": pid, "ADMIT_DATE": _iso(admit), "DISCHARGE_DATE": _iso(discharge),
            "DISCHARGE_STATUS": np.where(hosp, "EX", "HO"),
        }),
        "LAB_RESULT_CM.csv": pd.DataFrame({
            "PATID": pid[lab_pid], "LAB_LOINC": "2160-0", "RESULT_NUM": [f"{v:.2f}" for v in lab_v],
            "RESULT_UNIT": "mg/dL", "RESULT_DATE": _iso(lab_t),
        }),
        "DIAGNOSIS.csv": pd.concat(dx_rows, ignore_index=True),
        "PROCEDURES.csv": px,
        "MED_ADMIN.csv": med,
        "DEATH.csv": pd.DataFrame({"PATID": pid[dead], "DEATH_DATE": _date(death_date[dead])}),
    }
    names = np.asarray(TRAJECTORY_GROUPS, dtype=object)[groups]
    severity = np.where(groups == 0, "none", np.where(worst == 1, "mild", "severe"))
    truth = pd.DataFrame({
        "encounter_id": eid,
        "patient_id": pid,
        "trajectory_group": names,
        "severity": severity,
        "worst_stage": worst,
        "subphenotype": np.where(groups == 0, "no-AKI", pd.Series(severity) + "-" + pd.Series(names)),
        "reference_creatinine": b,
        "cci": cci,
        "icu": icu,
        "hospital_death": hosp,
        "hazard_per_day": haz,
        "death_days_after_discharge": np.where(dies_later, t_death, -1),
        "censor_days_after_discharge": np.where(censored, t_cens, -1),
        "surv_time": np.where(hosp, np.nan, surv_time.astype(float)),
        "surv_event": pd.array(np.where(hosp, None, surv_event), dtype="boolean"),
    })
    return SyntheticCohort(tables, truth, config)


def generate_to_dir(config: GeneratorConfig, out_dir) -> SyntheticCohort:
    cohort = generate(config)
    cohort.write(out_dir)
    return cohort
