"""Code-driven encounter features: Charlson index, comorbidity flags,
ICU / ventilation / vasopressor use and nephrotoxin exposure counts."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from ._util import DAY, normalize_code
from .codemaps import NEPHROTOXIN_GROUPS, VASOPRESSOR_GROUP, CodeMap
from .ingest import CohortStore, event_keys, patient_index

COMORBIDITY_FLAGS = ("hypertension", "chronic_pulmonary", "cardiovascular", "diabetes", "ckd_history")
NEPHROTOXIN_WINDOWS = ("nephrotox_2d", "nephrotox_3d", "nephrotox_to_onset")


def charlson_score(diagnoses: Iterable[tuple], admit: int, codemap: CodeMap, lookback_days: int | None = None) -> int:
    """Charlson index from ``(date, system, code)`` diagnoses dated in [admit - lookback, admit).

    Dates are compared at day resolution: the admission day itself is not
    history.
    """
    lookback = codemap.lookback_days if lookback_days is None else lookback_days
    hi = (int(admit) // DAY) * DAY
    lo = hi - lookback * DAY
    mask = 0
    for date, system, code in diagnoses:
        if lo <= date < hi:
            mask |= codemap.match_one(system, normalize_code(code), "diagnosis")
    return codemap.charlson_from_mask(mask)


def detect_code_flag(events: Iterable[tuple], list_name: str, codemap: CodeMap) -> bool:
    """True iff any ``(system, code[, context])`` event matches the named list."""
    bit = codemap.bit(list_name)
    for ev in events:
        system, code = ev[0], normalize_code(ev[1])
        context = ev[2] if len(ev) > 2 else "diagnosis"
        if codemap.match_one(system, code, context) & bit:
            return True
    return False


def nephrotoxin_group_count(meds: Iterable[tuple], start: int, end: int, codemap: CodeMap) -> int:
    """Distinct nephrotoxin groups among ``(time, name)`` events in [start, end)."""
    if start > end:
        raise ValueError("window start after end")
    names = [n for t, n in meds if start <= t < end]
    if not names:
        return 0
    mask = int(np.bitwise_or.reduce(codemap.medication_groups(names)))
    return bin(mask).count("1")


def _or_ranges(masks: np.ndarray, start: np.ndarray, stop: np.ndarray) -> np.ndarray:
    out = np.zeros(len(start), dtype=np.int64)
    for i in np.flatnonzero(stop > start):
        out[i] = np.bitwise_or.reduce(masks[start[i]:stop[i]])
    return out


def _popcount(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.int64)
    n = np.zeros(len(x), dtype=np.int64)
    for b in range(len(NEPHROTOXIN_GROUPS)):
        n += (x >> b) & 1
    return n


class CodeIndex:
    """Coded events and medications of a store, classified once and keyed for range queries."""

    def __init__(self, store: CohortStore, codemap: CodeMap):
        self.store = store
        self.codemap = codemap
        codes = store.codes
        pidx = patient_index(store, codes["patient_id"])
        dates = codes["date"].to_numpy(np.int64)
        order = np.lexsort((dates, pidx))
        self.code_keys = event_keys(pidx[order], dates[order])
        self.code_dates = dates[order]
        self.code_masks = codemap.match(codes["system"].to_numpy()[order], codes["code"].to_numpy()[order],
                                        codes["context"].to_numpy()[order])
        meds = store.meds
        mp = patient_index(store, meds["patient_id"])
        mt = meds["time"].to_numpy(np.int64)
        morder = np.lexsort((mt, mp))
        self.med_keys = event_keys(mp[morder], mt[morder])
        self.med_masks = codemap.medication_groups(meds["name"].to_numpy()[morder])

    def code_range(self, pidx, lo, hi, closed_right=False):
        start = np.searchsorted(self.code_keys, event_keys(pidx, lo), side="left")
        stop = np.searchsorted(self.code_keys, event_keys(pidx, hi), side="right" if closed_right else "left")
        return start, stop

    def code_mask(self, pidx, lo, hi, closed_right=False) -> np.ndarray:
        s, e = self.code_range(pidx, lo, hi, closed_right)
        return _or_ranges(self.code_masks, s, e)

    def code_times(self, pidx: int, lo: int, hi: int, list_name: str) -> list:
        """Dates of events matching ``list_name`` for one patient in [lo, hi)."""
        s, e = self.code_range(np.array([pidx]), np.array([lo]), np.array([hi]))
        bit = self.codemap.bit(list_name)
        sl = slice(s[0], e[0])
        return self.code_dates[sl][(self.code_masks[sl] & bit) != 0].tolist()

    def med_mask(self, pidx, lo, hi) -> np.ndarray:
        start = np.searchsorted(self.med_keys, event_keys(pidx, lo), side="left")
        stop = np.searchsorted(self.med_keys, event_keys(pidx, hi), side="left")
        return _or_ranges(self.med_masks, start, stop)


def encounter_features(index: CodeIndex, encounters: pd.DataFrame, onsets: Sequence | None = None) -> pd.DataFrame:
    """One row of features per encounter, aligned with ``encounters``.

    ``onsets`` holds each encounter's first AKI onset (epoch seconds) or
    None; it bounds the admission-to-onset nephrotoxin window.
    """
    cm = index.codemap
    pidx = patient_index(index.store, encounters["patient_id"])
    admit = encounters["admit"].to_numpy(np.int64)
    discharge = encounters["discharge"].to_numpy(np.int64)
    admit_day = (admit // DAY) * DAY
    lookback = admit_day - cm.lookback_days * DAY

    prior = index.code_mask(pidx, lookback, admit_day)
    stay = index.code_mask(pidx, admit_day, discharge, closed_right=True)
    history = prior | stay
    cci = np.fromiter((cm.charlson_from_mask(int(m)) for m in prior), dtype=np.int64, count=len(prior))

    def has(mask, name):
        if name not in cm.bits:
            return np.zeros(len(mask), dtype=bool)
        return (mask & cm.bit(name)) != 0

    cardio = has(history, "cci:congestive_heart_failure") | has(history, "cci:peripheral_vascular")
    cardio |= has(history, "cad")
    out = pd.DataFrame({
        "cci": cci,
        "hypertension": has(history, "hypertension"),
        "chronic_pulmonary": has(history, "cci:chronic_pulmonary"),
        "cardiovascular": cardio,
        "diabetes": has(history, "cci:diabetes") | has(history, "cci:diabetes_complicated"),
        "ckd_history": has(prior, "ckd"),
        "icu": has(stay, "icu"),
        "vent": has(stay, "vent"),
    })
    vaso_bit = 1 << NEPHROTOXIN_GROUPS.index(VASOPRESSOR_GROUP)
    out["vasopressor"] = (index.med_mask(pidx, admit, discharge + 1) & vaso_bit) != 0
    out["nephrotox_2d"] = _popcount(index.med_mask(pidx, admit, admit + 2 * DAY))
    out["nephrotox_3d"] = _popcount(index.med_mask(pidx, admit, admit + 3 * DAY))
    if onsets is None:
        out["nephrotox_to_onset"] = np.nan
    else:
        on = np.array([np.nan if o is None else o for o in onsets], dtype=float)
        valid = ~np.isnan(on)
        counts = np.full(len(on), np.nan)
        if valid.any():
            end = on[valid].astype(np.int64)
            counts[valid] = _popcount(index.med_mask(pidx[valid], admit[valid], end))
        out["nephrotox_to_onset"] = counts
    return out
