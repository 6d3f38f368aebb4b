"""Grouped summary tables, mortality models and Kaplan-Meier curve points
computed from the phenotype and outcome files alone."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .engine import SUBPHENOTYPES, TRAJECTORY_GROUPS
from .outcomes import covariate_frame
from .stats import (
    NonConvergenceError,
    RankDeficientError,
    bonferroni,
    categorical_test,
    continuous_test,
    fit_cox,
    fit_logistic,
    fit_multinomial,
    harrell_c,
    ipw_weights,
    km_estimate,
    log_rank,
)
from .stats.survival import Z95

SUMMARY_KINDS = ("mean_sd", "median_iqr", "n_pct")
GROUPINGS = ("trajectory", "severity", "subphenotype", "icu", "non_icu")
GROUP_LEVELS = {
    "trajectory": TRAJECTORY_GROUPS,
    "severity": ("none", "mild", "severe"),
    "subphenotype": SUBPHENOTYPES,
    "icu": TRAJECTORY_GROUPS,
    "non_icu": TRAJECTORY_GROUPS,
}
# pairwise comparison references and their footnote markers
MARKERS = (("a", ("no-AKI", "none")), ("b", ("rapidly-reversed",)), ("c", ("persistent-with-recovery",)))
ALPHA = 0.05

DEFAULT_VARIABLES = (
    ("age", "mean_sd"),
    ("female", "n_pct"),
    ("race_aa", "n_pct"),
    ("cci", "median_iqr"),
    ("hypertension", "n_pct"),
    ("chronic_pulmonary", "n_pct"),
    ("cardiovascular", "n_pct"),
    ("diabetes", "n_pct"),
    ("ckd", "n_pct"),
    ("reference_creatinine", "median_iqr"),
    ("reference_egfr", "median_iqr"),
    ("icu", "n_pct"),
    ("vent", "n_pct"),
    ("vasopressor", "n_pct"),
    ("nephrotox_3d", "median_iqr"),
    ("krt", "n_pct"),
    ("aki_duration_days", "median_iqr"),
    ("hospital_death", "n_pct"),
    ("mortality_30d", "n_pct"),
    ("mortality_365d", "n_pct"),
    ("mortality_1095d", "n_pct"),
    ("death_30d_after_discharge", "n_pct"),
    ("readmit_30d", "n_pct"),
    ("new_ckd_90d", "n_pct"),
    ("new_krt_90d", "n_pct"),
)

COVARIATES_A = ("age_over_65", "female", "race_aa", "cci")
COX_EXTRA_A = ("vent", "icu")
COHORTS = ("all", "icu", "non_icu")
ADJUSTMENTS = ("unadjusted", "A", "B", "C")
MODEL_KINDS = ("logistic", "cox")


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class ReportSpec:
    grouping: str = "trajectory"
    variables: tuple = DEFAULT_VARIABLES
    pairwise: bool = True

    def __post_init__(self):
        if self.grouping not in GROUPINGS:
            raise ReportError(f"unknown grouping {self.grouping!r}; choose from {GROUPINGS}")
        for name, kind in self.variables:
            if kind not in SUMMARY_KINDS:
                raise ReportError(f"variable {name!r}: unknown summary kind {kind!r}")


def analysis_frame(phenotype: pd.DataFrame, outcomes: pd.DataFrame) -> pd.DataFrame:
    """Phenotype and outcomes joined per encounter, sorted by encounter id."""
    df = phenotype.merge(outcomes.drop(columns=[c for c in ("disposition",) if c in outcomes]), on="encounter_id",
                         how="left", validate="one_to_one")
    df = df.sort_values("encounter_id", kind="mergesort").reset_index(drop=True)
    # boolean columns with gaps come back from CSV as "True"/"False" strings
    for c in df.columns:
        if df[c].dtype == object:
            vals = set(df[c].dropna().unique())
            if vals and vals <= {"True", "False", True, False}:
                df[c] = df[c].map({"True": True, "False": False, True: True, False: False}).astype("boolean")
    df["female"] = df["sex"] == "female"
    df["ckd"] = df["ckd_present"] == "yes"
    for c in COVARIATES_A[1:] + COX_EXTRA_A:
        if c in df:
            df[c] = df[c].astype(bool)
    return df


def _subset(df: pd.DataFrame, grouping: str) -> tuple[pd.DataFrame, str]:
    if grouping == "icu":
        return df[df["icu"]], "trajectory_group"
    if grouping == "non_icu":
        return df[~df["icu"]], "trajectory_group"
    return df, {"trajectory": "trajectory_group", "severity": "severity", "subphenotype": "subphenotype"}[grouping]


def _values(s: pd.Series, kind: str) -> np.ndarray:
    s = s.dropna()
    if kind == "n_pct":
        return s.astype(bool).to_numpy()
    return s.astype(float).to_numpy()


def _format(v: np.ndarray, kind: str) -> str:
    if len(v) == 0:
        return ""
    if kind == "mean_sd":
        sd = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
        return f"{np.mean(v):.1f} ± {sd:.1f}"
    if kind == "median_iqr":
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        return f"{med:.2f} ({q1:.2f}-{q3:.2f})"
    k = int(v.sum())
    return f"{k} ({100.0 * k / len(v):.1f})"


def _compare(samples: list, kind: str):
    if kind == "n_pct":
        table = np.array([[int(s.sum()), int(len(s) - s.sum())] for s in samples])
        return categorical_test(table)
    return continuous_test(samples, kind)


def summary_table(df: pd.DataFrame, spec: ReportSpec) -> pd.DataFrame:
    """One row per variable, one column per group, plus the overall p-value.

    Cells carry the summary and, when pairwise comparison is on, the markers
    of references the group differs from at Bonferroni-adjusted p < 0.05.
    """
    sub, col = _subset(df, spec.grouping)
    levels = list(GROUP_LEVELS[spec.grouping])
    for name, _ in spec.variables:
        if name not in df.columns:
            raise ReportError(f"unknown variable {name!r} in report spec")
    groups = {g: sub[sub[col] == g] for g in levels}
    rows = [{"variable": "N", **{g: str(len(groups[g])) for g in levels}, "p_value": ""}]
    for name, kind in spec.variables:
        vals = {g: _values(groups[g][name], kind) for g in levels}
        row = {"variable": f"{name}, {kind}"}
        present = [g for g in levels if len(vals[g])]
        overall = _compare([vals[g] for g in present], kind) if len(present) >= 2 else None
        row["p_value"] = "" if overall is None else f"{overall.p_value:.4g}"
        marks = {g: "" for g in levels}
        if spec.pairwise:
            pairs = []
            for mark, refs in MARKERS:
                ref = next((r for r in refs if r in levels), None)
                if ref is None or not len(vals[ref]):
                    continue
                for g in present:
                    if g != ref and (mark == "a" or levels.index(g) > levels.index(ref)):
                        pairs.append((g, mark, _compare([vals[g], vals[ref]], kind).p_value))
            adj = bonferroni([p for _, _, p in pairs]) if pairs else []
            for (g, mark, _), pa in zip(pairs, adj):
                if pa < ALPHA:
                    marks[g] += mark
        for g in levels:
            cell = _format(vals[g], kind)
            row[g] = f"{cell} {marks[g]}".rstrip() if cell else ""
        rows.append(row)
    return pd.DataFrame(rows, columns=["variable"] + levels + ["p_value"])


# -- models -------------------------------------------------------------------------

@dataclass
class ModelResult:
    model_id: str
    kind: str
    cohort: str
    adjustment: str
    n: int = 0
    n_events: int = 0
    dropped: list = field(default_factory=list)
    fit: dict | None = None
    error: str | None = None
    c_index: float | None = None

    @property
    def converged(self) -> bool:
        return self.fit is not None and bool(self.fit.get("converged"))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("model_id", "kind", "cohort", "adjustment", "n", "n_events",
                                               "dropped", "c_index", "error", "fit")}


def model_ids() -> list:
    return [f"{k}-{c}-{a}" for k in MODEL_KINDS for c in COHORTS for a in ADJUSTMENTS]


def _design(df: pd.DataFrame, kind: str, cohort: str, adjustment: str):
    present = [g for g in TRAJECTORY_GROUPS[1:] if (df["trajectory_group"] == g).any()]
    cols = {f"group:{g}": (df["trajectory_group"] == g).astype(float) for g in present}
    if adjustment != "unadjusted":
        cov = covariate_frame(df)
        for c in COVARIATES_A:
            cols[c] = cov[c]
        if kind == "cox":
            for c in COX_EXTRA_A:
                cols[c] = cov[c]
        if adjustment == "B":
            cols["severe_aki"] = (df["worst_stage"] >= 2).astype(float)
        elif adjustment == "C":
            cols["aki_stage3"] = (df["worst_stage"] >= 3).astype(float)
    X = pd.DataFrame(cols, index=df.index)
    const = [c for c in X.columns if not c.startswith("group:") and X[c].nunique() <= 1]
    return X.drop(columns=const), const


def _cohort(df: pd.DataFrame, cohort: str) -> pd.DataFrame:
    if cohort == "icu":
        return df[df["icu"]]
    if cohort == "non_icu":
        return df[~df["icu"]]
    return df


def _ratio_table(fit: dict, names: list) -> dict:
    coef = np.asarray(fit["coef"])
    se = np.asarray(fit["se"])
    with np.errstate(over="ignore"):
        fit["ratio"] = np.exp(coef).tolist()
        fit["ratio_lo"] = np.exp(coef - Z95 * se).tolist()
        fit["ratio_hi"] = np.exp(coef + Z95 * se).tolist()
    return fit


def fit_model(df: pd.DataFrame, kind: str, cohort: str, adjustment: str, ties: str = "efron") -> ModelResult:
    mid = f"{kind}-{cohort}-{adjustment}"
    res = ModelResult(mid, kind, cohort, adjustment)
    sub = _cohort(df, cohort)
    if kind == "cox":
        sub = sub[sub["surv_time"].notna()]
    res.n = int(len(sub))
    if res.n == 0:
        res.error = "no rows"
        return res
    X, dropped = _design(sub, kind, cohort, adjustment)
    res.dropped = dropped
    try:
        if kind == "logistic":
            y = sub["hospital_death"].astype(float).to_numpy()
            res.n_events = int(y.sum())
            design = np.column_stack([np.ones(len(X)), X.to_numpy(float)])
            fit = fit_logistic(design, y, names=["intercept"] + list(X.columns))
            res.fit = _ratio_table(fit.to_dict(), fit.names)
        else:
            t = sub["surv_time"].astype(float).to_numpy()
            e = sub["surv_event"].astype(bool).to_numpy()
            res.n_events = int(e.sum())
            fit = fit_cox(t, e, X.to_numpy(float), ties=ties, names=list(X.columns))
            res.fit = fit.to_dict()
            res.fit = _ratio_table(res.fit, fit.names)
            res.c_index = float(harrell_c(t, e, X.to_numpy(float) @ fit.coef))
    except (RankDeficientError, ValueError) as exc:
        res.error = str(exc)
    return res


def fit_models(df: pd.DataFrame, ids=None, ties: str = "efron") -> list:
    ids = model_ids() if not ids else list(ids)
    known = set(model_ids())
    bad = [m for m in ids if m not in known]
    if bad:
        raise ReportError(f"unknown model ids {bad}; known: {sorted(known)}")
    out = []
    for mid in ids:
        kind, rest = mid.split("-", 1)
        cohort, adj = rest.rsplit("-", 1)
        out.append(fit_model(df, kind, cohort, adj, ties))
    return out


# -- Kaplan-Meier ---------------------------------------------------------------------

def km_curves(df: pd.DataFrame, floor: float = 1e-6):
    """Unadjusted and IPW-adjusted KM points per trajectory group, plus the
    propensity summary and an unweighted log-rank test across groups."""
    sub = df[df["surv_time"].notna()]
    present = [g for g in TRAJECTORY_GROUPS if (sub["trajectory_group"] == g).any()]
    gidx = sub["trajectory_group"].map({g: i for i, g in enumerate(present)}).to_numpy()
    cov = covariate_frame(sub)[list(COVARIATES_A)]
    X = np.column_stack([np.ones(len(sub)), cov.to_numpy(float)])
    keep = [0] + [j + 1 for j, c in enumerate(cov.columns) if cov[c].nunique() > 1]
    X = X[:, keep]
    prop = {"groups": present, "covariates": ["intercept"] + [cov.columns[j - 1] for j in keep[1:]]}
    if len(present) > 1:
        fit = fit_multinomial(X, gidx, len(present))
        fallback = None
        if not fit.converged:
            # separation in a small group: fall back to marginal group frequencies
            fallback = "intercept-only"
            X = X[:, :1]
            fit = fit_multinomial(X, gidx, len(present))
        pw = ipw_weights(fit, X, gidx, floor)
        prop.update(converged=fallback is None, fallback=fallback, n_capped=pw.n_capped, floor=floor,
                    max_weight=float(pw.weights.max()))
        weights = pw.weights
    else:
        weights = np.ones(len(sub))
        prop.update(converged=True, fallback=None, n_capped=0, floor=floor, max_weight=1.0)
    t = sub["surv_time"].astype(float).to_numpy()
    e = sub["surv_event"].astype(bool).to_numpy()
    frames = {"unadjusted": [], "ipw": []}
    curves = {}
    for i, g in enumerate(present):
        m = gidx == i
        for label, w in (("unadjusted", None), ("ipw", weights[m])):
            c = km_estimate(t[m], e[m], w)
            curves[(label, g)] = c
            frames[label].append(pd.DataFrame({"group": g, "time": np.r_[0.0, c.times],
                                               "survival": np.r_[1.0, c.survival],
                                               "n_risk": np.r_[w.sum() if w is not None else m.sum(), c.n_risk],
                                               "n_events": np.r_[0.0, c.n_events]}))
    lr = log_rank(t, e, sub["trajectory_group"].to_numpy()) if len(present) > 1 else None
    out = {k: pd.concat(v, ignore_index=True) if v else pd.DataFrame(columns=["group", "time", "survival",
                                                                              "n_risk", "n_events"])
           for k, v in frames.items()}
    logrank = None if lr is None else {"statistic": lr.statistic, "df": lr.df, "p_value": lr.p_value,
                                       "groups": lr.labels, "observed": lr.observed.tolist(),
                                       "expected": lr.expected.tolist()}
    return out, curves, prop, logrank


def km_at(curves: dict, times) -> pd.DataFrame:
    rows = []
    for (label, g), c in sorted(curves.items()):
        for t, s in zip(times, c.at(times)):
            rows.append({"curve": label, "group": g, "time": float(t), "survival": float(s)})
    return pd.DataFrame(rows, columns=["curve", "group", "time", "survival"])


# -- stage entry point -----------------------------------------------------------------

def _csv(df: pd.DataFrame) -> bytes:
    return df.to_csv(index=False, lineterminator="\n", float_format="%.10g").encode()


def run_stats(cfg, phenotype_dir, output_dir, model_ids_=None, outcomes_dir=None) -> dict:
    """Tables, model fits and KM points from a phenotype run's files.

    Returns the manifest; models that fail to converge are listed under
    ``non_converged`` (the caller decides whether that is fatal).
    """
    from .pipeline import MANIFEST_FILE, OUTCOMES_FILE, PHENOTYPE_FILE, PipelineError, _finish, _fresh_dir

    src = Path(phenotype_dir)
    osrc = Path(outcomes_dir) if outcomes_dir else src
    for p in (src / PHENOTYPE_FILE, osrc / OUTCOMES_FILE):
        if not p.is_file():
            raise PipelineError("stats", f"missing input {p}", 1)
    out = _fresh_dir(output_dir)
    read = dict(dtype={"encounter_id": str, "patient_id": str}, keep_default_na=False, na_values=[""])
    pheno = pd.read_csv(src / PHENOTYPE_FILE, **read)
    outc = pd.read_csv(osrc / OUTCOMES_FILE, **read)
    if pheno.empty:
        raise PipelineError("stats", "phenotype file has no encounters", 1)
    df = analysis_frame(pheno, outc)

    files = {}
    try:
        for g in GROUPINGS:
            files[f"table_{g}.csv"] = _csv(summary_table(df, ReportSpec(grouping=g)))
        results = fit_models(df, model_ids_, cfg.ties)
    except ReportError as exc:
        raise PipelineError("stats", str(exc), 2) from None
    files["models.json"] = _json([r.to_dict() for r in results])
    km, curves, prop, lr = km_curves(df, cfg.ipw_floor)
    files["km_unadjusted.csv"] = _csv(km["unadjusted"])
    files["km_ipw.csv"] = _csv(km["ipw"])
    files["km_summary.csv"] = _csv(km_at(curves, cfg.km_times))
    files["survival_tests.json"] = _json({"log_rank": lr, "propensity": prop})
    non_conv = [r.model_id for r in results if r.fit is not None and not r.converged]
    failed = [r.model_id for r in results if r.error is not None]
    counts = {"cohort_n": int(len(df)), "models_fit": len(results), "non_converged": non_conv,
              "failed": failed, "groups": {g: int(n) for g, n in sorted(df["trajectory_group"].value_counts().items())}}
    upstream = src / MANIFEST_FILE
    if upstream.is_file():
        counts["phenotype_manifest_hash"] = json.loads(upstream.read_text()).get("manifest_hash")
    return _finish(out, files, cfg, counts, "stats")


def _json(obj) -> bytes:
    from .pipeline import _json_bytes

    return _json_bytes(obj)


def require_converged(manifest: dict, requested) -> None:
    """Raise NonConvergenceError if any requested model did not converge."""
    bad = [m for m in manifest["counts"]["non_converged"] if m in set(requested)]
    if bad:
        raise NonConvergenceError(f"models did not converge: {bad}")
