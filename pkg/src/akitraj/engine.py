"""KDIGO creatinine staging, episode segmentation and trajectory classification.

Timestamps are epoch seconds. A series is the encounter's sorted in-stay
serum creatinine; the reference comes from :mod:`akitraj.baseline`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator, TransformerMixin

from ._util import DAY, EPS, HOUR
from .baseline import ReferenceCreatinine

TRAJECTORY_GROUPS = (
    "no-AKI",
    "rapidly-reversed",
    "persistent-with-recovery",
    "persistent-without-recovery",
)
SEVERITIES = ("none", "mild", "severe")
SUBPHENOTYPES = (
    "no-AKI",
    "mild-rapidly-reversed",
    "mild-persistent-with-recovery",
    "mild-persistent-without-recovery",
    "severe-rapidly-reversed",
    "severe-persistent-with-recovery",
    "severe-persistent-without-recovery",
)
CRITERIA = ("none", "absolute-48h", "relative-ratio", "krt")


@dataclass(frozen=True)
class KdigoParams:
    abs_rise: float = 0.3
    abs_window_hours: int = 48
    rel_window_days: int = 7
    stage1_ratio: float = 1.5
    stage2_ratio: float = 2.0
    stage3_ratio: float = 3.0
    rapid_reversal_hours: int = 48


DEFAULT_PARAMS = KdigoParams()


@dataclass(frozen=True)
class CreatinineSeries:
    times: tuple
    values: tuple

    def __post_init__(self):
        if len(self.times) != len(self.values):
            raise ValueError("times and values differ in length")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("series times must be strictly increasing")

    def __len__(self):
        return len(self.times)

    @classmethod
    def from_observations(cls, times: Sequence[int], values: Sequence[float]) -> "CreatinineSeries":
        """Sort by time; duplicate timestamps keep the maximum value."""
        best: dict[int, float] = {}
        for t, v in zip(times, values):
            t = int(t)
            v = float(v)
            if t not in best or v > best[t]:
                best[t] = v
        keys = sorted(best)
        return cls(tuple(keys), tuple(best[k] for k in keys))


@dataclass(frozen=True)
class AkiPointAssessment:
    time: int
    creatinine: float  # NaN for a KRT-only point
    nadir_48h: float
    baseline_7d: float
    ratio: float  # creatinine / baseline_7d
    ratio_to_reference: float
    stage: int
    criterion: str


@dataclass(frozen=True)
class AkiEpisode:
    onset: int
    resolution: int | None
    last_observation: int
    peak_creatinine: float
    peak_stage: int
    krt: bool

    @property
    def resolved(self) -> bool:
        return self.resolution is not None

    @property
    def duration_hours(self) -> float:
        end = self.resolution if self.resolution is not None else self.last_observation
        return (end - self.onset) / HOUR

    @property
    def duration_days(self) -> float:
        return self.duration_hours / 24.0


@dataclass(frozen=True)
class EncounterAkiResult:
    has_aki: bool
    worst_stage: int
    krt: bool
    first_trajectory: str | None  # "rapidly-reversed" | "persistent" | None
    recovered: bool
    trajectory_group: str
    severity: str
    subphenotype: str
    recurrent: bool
    n_episodes: int
    aki_duration_days: float
    first_onset: int | None
    first_episode_hours: float | None
    note: str = ""
    episodes: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["episodes"] = [
            {
                "onset": e.onset,
                "resolution": e.resolution,
                "duration_days": e.duration_days,
                "peak_creatinine": e.peak_creatinine,
                "peak_stage": e.peak_stage,
                "krt": e.krt,
            }
            for e in self.episodes
        ]
        return d


def _krt_active(t: int, intervals) -> bool:
    for start, end in intervals:
        if start <= t < end:
            return True
    return False


def assess_points(
    series: CreatinineSeries,
    ref: ReferenceCreatinine,
    krt_intervals: Sequence[tuple[int, int]] = (),
    params: KdigoParams = DEFAULT_PARAMS,
) -> list[AkiPointAssessment]:
    """Stage every measurement against the KDIGO creatinine criteria.

    Absolute criterion: rise of ``abs_rise`` over the minimum of the
    measurements in ``[t-48h, t)``; the reference joins that minimum when
    its anchor lies in the window or the window holds no measurement.
    Relative criterion: ratio to ``min(reference, measurements in [t-7d, t))``.
    Each KRT interval ``[start, end)`` adds a stage-3 point at ``start``
    when no measurement falls at that exact time, and forces stage 3 on
    every measurement inside it.
    """
    if len(series) == 0:
        raise ValueError("cannot assess an empty series")
    times = list(series.times)
    values = list(series.values)
    intervals = sorted((int(a), int(b)) for a, b in krt_intervals if b > a)
    if intervals:
        present = set(times)
        for start, _ in intervals:
            if start not in present:
                times.append(start)
                values.append(math.nan)
                present.add(start)
        order = sorted(range(len(times)), key=times.__getitem__)
        times = [times[i] for i in order]
        values = [values[i] for i in order]

    w48 = params.abs_window_hours * HOUR
    w7 = params.rel_window_days * DAY
    ref_value = ref.value
    ref_anchor = ref.anchor
    abs_thr = params.abs_rise - EPS
    r1 = params.stage1_ratio - EPS
    r2 = params.stage2_ratio - EPS
    r3 = params.stage3_ratio - EPS

    out = []
    for i, t in enumerate(times):
        v = values[i]
        lo48 = t - w48
        lo7 = t - w7
        nadir = math.inf
        base7 = ref_value
        j = i - 1
        while j >= 0 and times[j] >= lo7:
            pv = values[j]
            if pv == pv:  # skip NaN KRT points
                if pv < base7:
                    base7 = pv
                if times[j] >= lo48 and pv < nadir:
                    nadir = pv
            j -= 1
        if nadir == math.inf or lo48 <= ref_anchor < t:
            nadir = min(nadir, ref_value)
        krt = bool(intervals) and _krt_active(t, intervals)
        if v != v:
            ratio = math.nan
            absolute = relative = False
        else:
            ratio = v / base7
            absolute = v - nadir >= abs_thr
            relative = ratio >= r1
        if krt:
            stage, crit = 3, "krt"
        else:
            if relative and ratio >= r3:
                stage = 3
            elif relative and ratio >= r2:
                stage = 2
            elif relative or absolute:
                stage = 1
            else:
                stage = 0
            crit = "relative-ratio" if relative else ("absolute-48h" if absolute else "none")
        out.append(
            AkiPointAssessment(
                time=t,
                creatinine=v,
                nadir_48h=nadir,
                baseline_7d=base7,
                ratio=ratio,
                ratio_to_reference=v / ref_value if v == v else math.nan,
                stage=stage,
                criterion=crit,
            )
        )
    return out


def segment_episodes(assessments: Sequence[AkiPointAssessment]) -> list[AkiEpisode]:
    """Split staged points into episodes.

    An episode opens at a staged point that follows a non-AKI state and
    closes at the next point where no criterion fires (the resolution time).
    An episode still open at the last point is unresolved.
    """
    episodes = []
    onset = None
    peak_scr = -math.inf
    peak_stage = 0
    krt = False
    last_time = None
    for a in assessments:
        if last_time is not None and a.time < last_time:
            raise ValueError("assessments must be time-ordered")
        last_time = a.time
        if a.stage > 0:
            if onset is None:
                onset = a.time
                peak_scr, peak_stage, krt = -math.inf, 0, False
            if a.creatinine == a.creatinine and a.creatinine > peak_scr:
                peak_scr = a.creatinine
            peak_stage = max(peak_stage, a.stage)
            krt = krt or a.criterion == "krt"
        elif onset is not None:
            episodes.append(AkiEpisode(onset, a.time, a.time, _finite(peak_scr), peak_stage, krt))
            onset = None
    if onset is not None:
        episodes.append(AkiEpisode(onset, None, last_time, _finite(peak_scr), peak_stage, krt))
    return episodes


def _finite(x: float) -> float:
    return x if math.isfinite(x) else math.nan


def classify_encounter(
    episodes: Sequence[AkiEpisode],
    assessments: Sequence[AkiPointAssessment],
    params: KdigoParams = DEFAULT_PARAMS,
) -> EncounterAkiResult:
    """Trajectory, recovery, severity and subphenotype for one encounter.

    The trajectory is decided by the first episode alone: rapidly reversed
    when it resolves within 48 h of onset (inclusive), persistent otherwise.
    Recovery is read from the last assessment of the stay.
    """
    recovered = not assessments or assessments[-1].stage == 0
    if not episodes:
        return EncounterAkiResult(
            has_aki=False, worst_stage=0, krt=False, first_trajectory=None,
            recovered=recovered, trajectory_group="no-AKI", severity="none",
            subphenotype="no-AKI", recurrent=False, n_episodes=0,
            aki_duration_days=0.0, first_onset=None, first_episode_hours=None,
        )
    first = episodes[0]
    limit = params.rapid_reversal_hours * HOUR
    note = ""
    if first.resolved and first.resolution - first.onset <= limit:
        first_traj = "rapidly-reversed"
        group = "rapidly-reversed"
    else:
        first_traj = "persistent"
        if not first.resolved and first.last_observation - first.onset < limit:
            note = "unresolved-under-48h"
        group = "persistent-with-recovery" if recovered else "persistent-without-recovery"
    worst = max(a.stage for a in assessments)
    severity = "mild" if worst == 1 else "severe"
    return EncounterAkiResult(
        has_aki=True,
        worst_stage=worst,
        krt=any(e.krt for e in episodes),
        first_trajectory=first_traj,
        recovered=recovered,
        trajectory_group=group,
        severity=severity,
        subphenotype=f"{severity}-{group}",
        recurrent=len(episodes) >= 2,
        n_episodes=len(episodes),
        aki_duration_days=sum(e.duration_days for e in episodes),
        first_onset=first.onset,
        first_episode_hours=first.duration_hours,
        note=note,
        episodes=tuple(episodes),
    )


def phenotype_series(
    series: CreatinineSeries,
    ref: ReferenceCreatinine,
    krt_intervals: Sequence[tuple[int, int]] = (),
    params: KdigoParams = DEFAULT_PARAMS,
) -> EncounterAkiResult:
    """assess -> segment -> classify in one call."""
    pts = assess_points(series, ref, krt_intervals, params)
    return classify_encounter(segment_episodes(pts), pts, params)


class AkiPhenotyper(TransformerMixin, BaseEstimator):
    """Estimator-style wrapper around the KDIGO/ADQI rules.

    ``transform`` takes a long table with one row per creatinine
    measurement and returns one row per encounter.

    Parameters
    ----------
    abs_rise, abs_window_hours, rel_window_days : KDIGO detection criteria.
    stage2_ratio, stage3_ratio : lower bounds of stages 2 and 3.
    rapid_reversal_hours : resolution limit for a rapidly reversed episode.

    Input columns: ``encounter_id``, ``time`` (datetime-like),
    ``creatinine``, ``reference``, ``reference_time``; optional
    ``reference_method``;
    ``krt_start``/``krt_end`` rows carry KRT intervals when ``creatinine``
    is missing.
    """

    def __init__(self, abs_rise=0.3, abs_window_hours=48, rel_window_days=7,
                 stage1_ratio=1.5, stage2_ratio=2.0, stage3_ratio=3.0, rapid_reversal_hours=48):
        self.abs_rise = abs_rise
        self.abs_window_hours = abs_window_hours
        self.rel_window_days = rel_window_days
        self.stage1_ratio = stage1_ratio
        self.stage2_ratio = stage2_ratio
        self.stage3_ratio = stage3_ratio
        self.rapid_reversal_hours = rapid_reversal_hours

    def _params(self) -> KdigoParams:
        if not (0 < self.stage1_ratio < self.stage2_ratio < self.stage3_ratio):
            raise ValueError("stage ratios must be increasing and positive")
        if self.abs_rise <= 0 or self.abs_window_hours <= 0 or self.rel_window_days <= 0:
            raise ValueError("detection windows and rise must be positive")
        return KdigoParams(
            float(self.abs_rise), int(self.abs_window_hours), int(self.rel_window_days),
            float(self.stage1_ratio), float(self.stage2_ratio), float(self.stage3_ratio),
            int(self.rapid_reversal_hours),
        )

    def fit(self, X, y=None):
        self._validate_frame(X)
        self.params_ = self._params()
        self.n_features_in_ = X.shape[1]
        return self

    @staticmethod
    def _validate_frame(X):
        if not isinstance(X, pd.DataFrame):
            raise TypeError("AkiPhenotyper expects a pandas DataFrame")
        missing = {"encounter_id", "time", "creatinine", "reference", "reference_time"} - set(X.columns)
        if missing:
            raise ValueError(f"missing columns: {sorted(missing)}")

    def transform(self, X) -> pd.DataFrame:
        if not hasattr(self, "params_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("call fit before transform")
        self._validate_frame(X)
        params = self.params_
        rows = []
        for eid, g in X.groupby("encounter_id", sort=True):
            scr = g[g["creatinine"].notna()]
            t = pd.to_datetime(scr["time"]).to_numpy(dtype="datetime64[s]").astype(np.int64)
            series = CreatinineSeries.from_observations(t, scr["creatinine"].to_numpy(float))
            first = g.iloc[0]
            anchor = int(pd.Timestamp(first["reference_time"]).value // 1_000_000_000)
            method = first["reference_method"] if "reference_method" in g.columns else "admission"
            ref = ReferenceCreatinine(float(first["reference"]), method, anchor)
            intervals = ()
            if "krt_start" in g.columns:
                k = g[g["krt_start"].notna()]
                intervals = [
                    (int(pd.Timestamp(a).value // 1_000_000_000), int(pd.Timestamp(b).value // 1_000_000_000))
                    for a, b in zip(k["krt_start"], k["krt_end"])
                ]
            res = phenotype_series(series, ref, intervals, params)
            d = res.to_dict()
            d.pop("episodes")
            d["encounter_id"] = eid
            rows.append(d)
        cols = ["encounter_id"] + [c for c in rows[0] if c != "encounter_id"] if rows else ["encounter_id"]
        return pd.DataFrame(rows, columns=cols)
