"""Stage orchestration: ingest -> reference/CKD -> KDIGO engine -> features
-> outcomes, with a manifest of hashes and per-stage counts."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from ._util import DAY, age_in_years, epoch_to_iso, sha256_bytes, sha256_file
from .baseline import ckd_epi_egfr, determine_reference_creatinine, identify_ckd
from .config import RunConfig
from .engine import CreatinineSeries, phenotype_series
from .features import CodeIndex, encounter_features
from .ingest import (
    CohortStore,
    apply_cohort_filters,
    creatinine_window,
    event_keys,
    load_cohort,
    patient_index,
)
from .outcomes import derive_outcomes

PHENOTYPE_FILE = "phenotype.csv"
OUTCOMES_FILE = "outcomes.csv"
MANIFEST_FILE = "manifest.json"
_FAR_PAST = -(1 << 32)


class PipelineError(Exception):
    """A stage failure carrying the stage name and the CLI exit code."""

    def __init__(self, stage: str, message: str, exit_code: int):
        super().__init__(message)
        self.stage = stage
        self.exit_code = exit_code


@dataclass
class _Context:
    store: CohortStore
    index: CodeIndex
    cfg: RunConfig
    enc: pd.DataFrame
    pidx: np.ndarray
    birth: np.ndarray
    sex: np.ndarray
    lab_t: np.ndarray
    lab_v: np.ndarray
    p_start: np.ndarray  # each encounter's patient lab rows
    p_stop: np.ndarray
    c_start: np.ndarray  # each encounter's patient codes before the admission day
    c_stop: np.ndarray
    k_start: np.ndarray  # codes from the admission day through discharge
    k_stop: np.ndarray


def _context(store: CohortStore, index: CodeIndex, cfg: RunConfig) -> _Context:
    enc = store.encounters
    pidx = patient_index(store, enc["patient_id"])
    admit = enc["admit"].to_numpy(np.int64)
    discharge = enc["discharge"].to_numpy(np.int64)
    lab_keys = event_keys(patient_index(store, store.labs["patient_id"]), store.labs["time"].to_numpy())
    far = np.full(len(enc), _FAR_PAST, np.int64)
    p_start = np.searchsorted(lab_keys, event_keys(pidx, far), side="left")
    p_stop = np.searchsorted(lab_keys, event_keys(pidx + 1, far), side="left")
    admit_day = (admit // DAY) * DAY
    c_start, c_stop = index.code_range(pidx, far, admit_day)
    k_start, k_stop = index.code_range(pidx, admit_day, discharge, closed_right=True)
    pats = store.patients
    return _Context(
        store, index, cfg, enc, pidx,
        pats["birth"].to_numpy(np.int64)[pidx], pats["sex"].to_numpy()[pidx],
        store.labs["time"].to_numpy(np.int64), store.labs["value"].to_numpy(float),
        p_start, p_stop, c_start, c_stop, k_start, k_stop,
    )


def _phenotype_rows(ctx: _Context, lo: int, hi: int) -> list:
    cm = ctx.index.codemap
    bit_ckd, bit_tx, bit_aki, bit_krt = (cm.bit(n) for n in ("ckd", "transplant", "aki", "krt"))
    masks, dates = ctx.index.code_masks, ctx.index.code_dates
    params = ctx.cfg.engine
    enc = ctx.enc
    eids = enc["encounter_id"].to_numpy()
    pids = enc["patient_id"].to_numpy()
    admits = enc["admit"].to_numpy(np.int64)
    discharges = enc["discharge"].to_numpy(np.int64)
    _, win_end = creatinine_window(enc)
    rows = []
    for i in range(lo, hi):
        admit, discharge, end = int(admits[i]), int(discharges[i]), int(win_end[i])
        t = ctx.lab_t[ctx.p_start[i]:ctx.p_stop[i]]
        v = ctx.lab_v[ctx.p_start[i]:ctx.p_stop[i]]
        a = int(np.searchsorted(t, admit, side="left"))
        b = int(np.searchsorted(t, end, side="right"))
        hist_t, hist_v = t[:a].tolist(), v[:a].tolist()
        series = CreatinineSeries.from_observations(t[a:b].tolist(), v[a:b].tolist())
        age = age_in_years(int(ctx.birth[i]), admit)
        sex = ctx.sex[i]

        cs, ce = ctx.c_start[i], ctx.c_stop[i]
        pm, pd_ = masks[cs:ce], dates[cs:ce]
        ckd = identify_ckd(
            admit, pd_[(pm & bit_ckd) != 0].tolist(), pd_[(pm & bit_tx) != 0].tolist(),
            pd_[(pm & bit_aki) != 0].tolist(), int(ce - cs), hist_t, hist_v, age, sex,
        )
        ref = determine_reference_creatinine(admit, hist_t, hist_v, list(series.times), list(series.values),
                                             ckd, age, sex)
        ref_egfr = ckd_epi_egfr(ref.value, max(age, 18), sex).egfr
        if ckd.present == "yes":
            ckd = ckd.with_stage(ref_egfr)

        ks, ke = ctx.k_start[i], ctx.k_stop[i]
        krt_days = np.unique(dates[ks:ke][(masks[ks:ke] & bit_krt) != 0])
        intervals = []
        for d in krt_days.tolist():
            s, e = max(d, admit), min(d + DAY, end + 1)
            if e > s:
                intervals.append((s, e))

        res = phenotype_series(series, ref, intervals, params)
        rows.append({
            "encounter_id": eids[i],
            "patient_id": pids[i],
            "admit": admit,
            "discharge": discharge,
            "age": age,
            "sex": sex,
            "n_creatinine": len(series),
            "reference_creatinine": ref.value,
            "reference_method": ref.method,
            "reference_time": ref.anchor,
            "reference_egfr": ref_egfr,
            "ckd_present": ckd.present,
            "ckd_basis": ckd.basis,
            "ckd_g_stage": ckd.g_stage,
            "akd_state": ckd.akd_state,
            "has_aki": res.has_aki,
            "worst_stage": res.worst_stage,
            "krt": res.krt,
            "first_trajectory": res.first_trajectory or "",
            "recovered": res.recovered,
            "trajectory_group": res.trajectory_group,
            "severity": res.severity,
            "subphenotype": res.subphenotype,
            "recurrent": res.recurrent,
            "n_episodes": res.n_episodes,
            "aki_duration_days": res.aki_duration_days,
            "first_onset": res.first_onset,
            "first_episode_hours": res.first_episode_hours,
            "note": res.note,
        })
    return rows


def _chunks(n: int, threads: int):
    k = max(1, min(threads, n))
    edges = np.linspace(0, n, k + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]


def phenotype_store(store: CohortStore, cfg: RunConfig, threads: int = 1, index: CodeIndex | None = None):
    """Phenotype every encounter of an already filtered store.

    Encounters are split into contiguous blocks, one per thread; blocks are
    rejoined in encounter order so the result does not depend on ``threads``.
    """
    index = index or CodeIndex(store, cfg.codemap)
    ctx = _context(store, index, cfg)
    n = len(store.encounters)
    blocks = _chunks(n, threads)
    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda lh: _phenotype_rows(ctx, *lh), blocks))
    else:
        parts = [_phenotype_rows(ctx, lo, hi) for lo, hi in blocks]
    rows = [r for p in parts for r in p]
    frame = pd.DataFrame(rows)
    if n == 0:
        return frame, index
    patients = store.patients.set_index("patient_id")
    frame["race_aa"] = patients.loc[frame["patient_id"], "race_aa"].to_numpy(bool)
    onsets = [None if (o is None or (isinstance(o, float) and math.isnan(o))) else int(o)
              for o in frame["first_onset"]]
    feats = encounter_features(index, store.encounters, onsets)
    frame = pd.concat([frame, feats.set_index(frame.index)], axis=1)
    return frame, index


def _to_csv_bytes(df: pd.DataFrame) -> bytes:
    return df.to_csv(index=False, lineterminator="\n", float_format="%.10g").encode()


def format_phenotype(frame: pd.DataFrame) -> pd.DataFrame:
    out = frame.copy()
    for col in ("admit", "discharge", "reference_time", "first_onset"):
        if col in out:
            out[col] = [epoch_to_iso(None if v is None or (isinstance(v, float) and math.isnan(v)) else int(v))
                        for v in out[col]]
    return out


def _fresh_dir(path) -> Path:
    p = Path(path)
    if p.exists() and any(p.iterdir()):
        raise PipelineError("config", f"output directory {p} is not empty", 2)
    p.mkdir(parents=True, exist_ok=True)
    return p


def input_hashes(cfg: RunConfig) -> dict:
    out = {}
    for name in sorted(cfg.ingest.tables):
        path = cfg.ingest.path_of(name)
        out[name] = sha256_file(path) if path.exists() else None
    return out


def manifest_hash(config_hash: str, inputs: dict, codemap_version: str) -> str:
    payload = {"config": config_hash, "inputs": inputs, "codemap_version": codemap_version}
    return sha256_bytes(json.dumps(payload, sort_keys=True).encode())


def _load(cfg: RunConfig, threads: int):
    from .ingest import IngestError

    try:
        store = load_cohort(cfg.ingest, threads)
    except IngestError as exc:
        raise PipelineError("ingest", str(exc), 2 if exc.kind == "config" else 1) from None
    filtered, tally = apply_cohort_filters(store)
    return store, filtered, tally


def run_phenotype(cfg: RunConfig, output_dir, threads: int = 1) -> dict:
    """Full per-encounter pipeline; writes phenotype, outcomes and manifest files."""
    out = _fresh_dir(output_dir)
    store, filtered, tally = _load(cfg, threads)
    try:
        frame, index = phenotype_store(filtered, cfg, threads)
    except ValueError as exc:
        raise PipelineError("phenotype", str(exc), 1) from None
    outcomes = _outcomes(filtered, frame, index, cfg)
    files = {
        PHENOTYPE_FILE: _to_csv_bytes(format_phenotype(frame)),
        OUTCOMES_FILE: _to_csv_bytes(outcomes),
        "data_quality.json": _json_bytes(store.errors),
        "exclusions.json": _json_bytes(tally),
    }
    counts = {
        "encounters_loaded": tally["loaded"],
        "encounters_excluded": sum(tally["excluded"].values()),
        "encounters_phenotyped": int(len(frame)),
        "outcome_rows": int(len(outcomes)),
        "patients": int(len(store.patients)),
        "creatinine_rows": int(len(store.labs)),
        "parse_errors": int(store.errors["total"]),
    }
    if len(frame):
        counts["trajectory_groups"] = {g: int(n) for g, n in sorted(frame["trajectory_group"].value_counts().items())}
    return _finish(out, files, cfg, counts, "phenotype")


def _outcomes(store, frame, index, cfg):
    if frame.empty:
        return pd.DataFrame({"encounter_id": []})
    try:
        return derive_outcomes(store, store.encounters, frame, index, cfg.mortality_anchor, cfg.admin_end)
    except ValueError as exc:
        raise PipelineError("outcomes", str(exc), 1) from None


def run_outcomes(cfg: RunConfig, phenotype_dir, output_dir, threads: int = 1) -> dict:
    """Re-derive outcomes for an existing phenotype file (e.g. with another anchor)."""
    src = Path(phenotype_dir) / PHENOTYPE_FILE
    if not src.is_file():
        raise PipelineError("outcomes", f"no phenotype results at {src}", 1)
    out = _fresh_dir(output_dir)
    pheno = pd.read_csv(src, dtype={"encounter_id": str, "patient_id": str}, keep_default_na=False,
                        na_values=[""])
    store, filtered, _ = _load(cfg, threads)
    keep = filtered.encounters[filtered.encounters["encounter_id"].isin(pheno["encounter_id"])]
    sub = filtered.with_encounters(keep)
    frame = pheno.set_index("encounter_id").loc[sub.encounters["encounter_id"]].reset_index()
    frame["krt"] = frame["krt"].astype(bool)
    index = CodeIndex(sub, cfg.codemap)
    outcomes = _outcomes(sub, frame, index, cfg)
    files = {OUTCOMES_FILE: _to_csv_bytes(outcomes)}
    counts = {"encounters_phenotyped": int(len(pheno)), "outcome_rows": int(len(outcomes))}
    return _finish(out, files, cfg, counts, "outcomes")


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n").encode()


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _finish(out: Path, files: dict, cfg: RunConfig, counts: dict, command: str) -> dict:
    for name, data in files.items():
        (out / name).write_bytes(data)
    inputs = input_hashes(cfg)
    chash = cfg.digest()
    manifest = {
        "command": command,
        "manifest_hash": manifest_hash(chash, inputs, cfg.codemap.version),
        "config_hash": chash,
        "inputs": inputs,
        "codemap": {"version": cfg.codemap.version, "digest": cfg.codemap.digest()},
        "engine": dict(cfg.engine.__dict__),
        "mortality_anchor": cfg.mortality_anchor,
        "package_version": __version__,
        "counts": counts,
        "outputs": {name: sha256_bytes(data) for name, data in sorted(files.items())},
    }
    (out / MANIFEST_FILE).write_bytes(_json_bytes(manifest))
    return manifest
