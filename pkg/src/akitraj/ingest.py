"""Load PCORnet-style delimited tables into an immutable cohort store.

Rows that fail to parse are dropped and tallied per table and reason. A
table whose parse-failure fraction exceeds ``error_tolerance`` aborts the
load. Implausible creatinine values (<= 0 or >= 50 mg/dL) are dropped and
tallied separately; they are valid rows carrying bad measurements, so they
do not count toward the tolerance.
"""
from __future__ import annotations

import copy
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd
import yaml

from ._util import DAY, HOUR, age_in_years, normalize_code, sha256_bytes
from .engine import CreatinineSeries

SCR_UMOL_PER_MGDL = 88.42
SCR_PLAUSIBLE = (0.0, 50.0)  # exclusive bounds, mg/dL
CREATININE_WINDOW_HOURS = 48
MIN_AGE = 18
DISPOSITIONS = ("expired", "home/rehab", "other-facility", "unknown")

REQUIRED_COLUMNS = {
    "demographic": ("patient_id", "birth_date", "sex"),
    "encounter": ("encounter_id", "patient_id", "admit", "discharge"),
    "lab": ("patient_id", "code", "value", "time"),
    "diagnosis": ("patient_id", "code", "system", "date"),
    "procedure": ("patient_id", "code", "system", "date"),
    "medication": ("patient_id", "name", "time"),
    "death": ("patient_id", "death_date"),
}
REQUIRED_TABLES = ("demographic", "encounter", "lab")

_table_schema = {
    "type": "object",
    "required": ["path", "columns"],
    "properties": {
        "path": {"type": "string", "minLength": 1},
        "columns": {"type": "object", "additionalProperties": {"type": "string", "minLength": 1}},
    },
}

INGEST_SCHEMA = {
    "type": "object",
    "required": ["tables"],
    "properties": {
        "delimiter": {"type": "string", "minLength": 1, "maxLength": 1},
        "timestamp_format": {"type": "string", "minLength": 1},
        "error_tolerance": {"type": "number", "minimum": 0, "maximum": 1},
        "max_error_samples": {"type": "integer", "minimum": 0},
        "mortality_anchor": {"enum": ["admission", "discharge"]},
        "creatinine_codes": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "code_systems": {"type": "object", "additionalProperties": {"enum": ["ICD9", "ICD10", "CPT"]}},
        "race_aa_values": {"type": "array", "items": {"type": "string"}},
        "dispositions": {
            "type": "object",
            "propertyNames": {"enum": list(DISPOSITIONS)},
            "additionalProperties": {"type": "array", "items": {"type": "string"}},
        },
        "tables": {
            "type": "object",
            "required": list(REQUIRED_TABLES),
            "propertyNames": {"enum": list(REQUIRED_COLUMNS)},
            "additionalProperties": _table_schema,
        },
    },
}


class IngestError(Exception):
    """Raised for unreadable inputs; ``kind`` is "config" or "data"."""

    def __init__(self, message: str, kind: str = "data"):
        super().__init__(message)
        self.kind = kind


def _default_ingest_raw() -> dict:
    return yaml.safe_load(resources.files("akitraj").joinpath("data/ingest_default.yaml").read_text())


@dataclass(frozen=True)
class IngestConfig:
    tables: dict
    delimiter: str = ","
    timestamp_format: str = "ISO8601"
    error_tolerance: float = 0.01
    max_error_samples: int = 20
    mortality_anchor: str = "admission"
    creatinine_codes: tuple = ("2160-0", "38483-4")
    code_systems: dict = field(default_factory=dict)
    race_aa_values: tuple = ()
    dispositions: dict = field(default_factory=dict)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, raw: dict | None, base_dir=".") -> "IngestConfig":
        """Overlay ``raw`` on the shipped defaults and validate."""
        merged = _default_ingest_raw()
        raw = copy.deepcopy(raw or {})
        tables = merged["tables"]
        for name, spec in raw.pop("tables", {}).items():
            base = tables.get(name, {"columns": {}})
            tables[name] = {
                "path": spec.get("path", base.get("path")),
                "columns": {**base.get("columns", {}), **spec.get("columns", {})},
            }
        merged.update(raw)
        merged["tables"] = {k: v for k, v in tables.items() if v.get("path")}
        try:
            jsonschema.validate(merged, INGEST_SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path)
            raise IngestError(f"ingest config invalid at '{path}': {exc.message}", "config") from None
        for name, spec in merged["tables"].items():
            missing = [c for c in REQUIRED_COLUMNS[name] if c not in spec["columns"]]
            if missing:
                raise IngestError(f"table {name!r} maps no column for {missing}", "config")
        return cls(
            tables=merged["tables"],
            delimiter=merged["delimiter"],
            timestamp_format=merged["timestamp_format"],
            error_tolerance=float(merged["error_tolerance"]),
            max_error_samples=int(merged["max_error_samples"]),
            mortality_anchor=merged["mortality_anchor"],
            creatinine_codes=tuple(merged["creatinine_codes"]),
            code_systems=dict(merged["code_systems"]),
            race_aa_values=tuple(str(v).lower() for v in merged["race_aa_values"]),
            dispositions={k: tuple(str(x).lower() for x in v) for k, v in merged["dispositions"].items()},
            base_dir=str(base_dir),
        )

    @classmethod
    def from_file(cls, path, base_dir=".") -> "IngestConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise IngestError(f"cannot read ingest config: {exc}", "config") from None
        return cls.from_dict(raw, base_dir)

    def path_of(self, table: str) -> Path:
        p = Path(self.tables[table]["path"])
        return p if p.is_absolute() else Path(self.base_dir) / p


class ErrorLedger:
    def __init__(self, max_samples: int = 20):
        self.counts: dict = {}
        self.rows: dict = {}
        self.samples: list = []
        self.max_samples = max_samples

    def add(self, table: str, reason: str, row_numbers, values=None):
        row_numbers = np.asarray(row_numbers)
        n = int(row_numbers.size)
        if n == 0:
            return
        self.counts.setdefault(table, {})
        self.counts[table][reason] = self.counts[table].get(reason, 0) + n
        room = self.max_samples - len(self.samples)
        if room > 0:
            vals = [None] * n if values is None else list(values)
            for r, v in list(zip(row_numbers.tolist(), vals))[:room]:
                self.samples.append({"table": table, "row": int(r), "reason": reason,
                                     "value": None if v is None else str(v)})

    @property
    def total(self) -> int:
        return sum(sum(d.values()) for d in self.counts.values())

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "counts": {t: dict(sorted(d.items())) for t, d in sorted(self.counts.items())},
            "rows_read": dict(sorted(self.rows.items())),
            "samples": self.samples,
        }


# Reasons that count toward the parse-failure tolerance.
PARSE_FAILURES = frozenset({
    "timestamp", "value", "unit", "missing-id", "sex", "empty-code", "code-system", "admit-after-discharge",
    "duplicate-encounter",
})


@dataclass(frozen=True)
class CohortStore:
    patients: pd.DataFrame  # patient_id, birth, sex, race_aa
    encounters: pd.DataFrame  # encounter_id, patient_id, admit, discharge, disposition
    labs: pd.DataFrame  # patient_id, time, value (creatinine mg/dL)
    codes: pd.DataFrame  # patient_id, date, system, code, context
    meds: pd.DataFrame  # patient_id, time, name
    deaths: pd.DataFrame  # patient_id, death
    errors: dict
    mortality_anchor: str = "admission"
    loaded_encounters: pd.DataFrame | None = None  # before cohort filtering

    @property
    def all_encounters(self) -> pd.DataFrame:
        return self.encounters if self.loaded_encounters is None else self.loaded_encounters

    def with_encounters(self, encounters: pd.DataFrame) -> "CohortStore":
        return replace(self, encounters=encounters.reset_index(drop=True), loaded_encounters=self.all_encounters)

    def serialize(self) -> bytes:
        """Canonical byte form; equal stores serialize identically."""
        buf = io.StringIO()
        for name in ("patients", "encounters", "labs", "codes", "meds", "deaths"):
            buf.write(f"# {name}\n")
            getattr(self, name).to_csv(buf, index=False, lineterminator="\n")
        return buf.getvalue().encode()

    def digest(self) -> str:
        return sha256_bytes(self.serialize())

    def encounter(self, encounter_id) -> "EncounterRecord":
        rows = self.encounters[self.encounters["encounter_id"] == str(encounter_id)]
        if rows.empty:
            raise KeyError(encounter_id)
        e = rows.iloc[0]
        pid = e["patient_id"]
        admit, discharge = int(e["admit"]), int(e["discharge"])
        hi = max(discharge, admit + CREATININE_WINDOW_HOURS * HOUR)
        lab = self.labs[(self.labs["patient_id"] == pid) & self.labs["time"].between(admit, hi)]
        lo_day = (admit // DAY) * DAY
        cod = self.codes[(self.codes["patient_id"] == pid) & self.codes["date"].between(lo_day, discharge)]
        med = self.meds[(self.meds["patient_id"] == pid) & self.meds["time"].between(admit, discharge)]
        return EncounterRecord(
            patient_id=pid, encounter_id=str(e["encounter_id"]), admit=admit, discharge=discharge,
            disposition=e["disposition"],
            labs=tuple(zip(lab["time"].tolist(), lab["value"].tolist())),
            codes=tuple(zip(cod["date"].tolist(), cod["system"].tolist(), cod["code"].tolist(),
                            cod["context"].tolist())),
            meds=tuple(zip(med["time"].tolist(), med["name"].tolist())),
        )


@dataclass(frozen=True)
class EncounterRecord:
    patient_id: str
    encounter_id: str
    admit: int
    discharge: int
    disposition: str
    labs: tuple  # (time, creatinine) within the creatinine window
    codes: tuple  # (date, system, code, context) dated during the stay
    meds: tuple  # (time, name) during the stay

    def __post_init__(self):
        if self.admit > self.discharge:
            raise ValueError("admit must not follow discharge")


def creatinine_series(encounter: EncounterRecord) -> CreatinineSeries:
    """Sorted in-stay creatinine; identical timestamps keep the larger value."""
    return CreatinineSeries.from_observations([t for t, _ in encounter.labs], [v for _, v in encounter.labs])


# -- loading -----------------------------------------------------------------

def _read_table(cfg: IngestConfig, name: str) -> pd.DataFrame:
    path = cfg.path_of(name)
    if not path.exists():
        raise IngestError(f"missing input file for table {name!r}: {path}", "data")
    mapping = cfg.tables[name]["columns"]
    try:
        df = pd.read_csv(path, sep=cfg.delimiter, dtype=str, keep_default_na=False, na_values=[""])
    except (pd.errors.ParserError, UnicodeDecodeError) as exc:
        raise IngestError(f"cannot parse {path}: {exc}", "data") from None
    missing = [src for src in mapping.values() if src not in df.columns]
    if missing:
        raise IngestError(f"{path.name}: mapped columns not in header: {missing}", "config")
    out = pd.DataFrame({dst: df[src] for dst, src in mapping.items()})
    out["_row"] = np.arange(2, len(df) + 2)  # 1-based file line, header is line 1
    return out


def _parse_time(cfg: IngestConfig, values: pd.Series) -> pd.Series:
    fmt = cfg.timestamp_format
    parsed = pd.to_datetime(values, format=fmt if fmt != "ISO8601" else "ISO8601", errors="coerce")
    if getattr(parsed.dt, "tz", None) is not None:
        parsed = parsed.dt.tz_convert("UTC").dt.tz_localize(None)
    return parsed


def _epoch(parsed: pd.Series) -> np.ndarray:
    return parsed.to_numpy(dtype="datetime64[s]").astype(np.int64)


def _drop(df, bad, ledger, table, reason, col=None):
    bad = np.asarray(bad, dtype=bool)
    if bad.any():
        vals = df.loc[bad, col].tolist() if col else None
        ledger.add(table, reason, df.loc[bad, "_row"].to_numpy(), vals)
    return df.loc[~bad]


def _times(cfg, df, col, ledger, table):
    parsed = _parse_time(cfg, df[col])
    bad = parsed.isna().to_numpy()
    df = _drop(df, bad, ledger, table, "timestamp", col).copy()
    df[col] = _epoch(parsed[~bad])
    return df


def _ids(df, ledger, table, cols):
    bad = np.zeros(len(df), dtype=bool)
    for c in cols:
        bad |= df[c].isna().to_numpy()
    out = _drop(df, bad, ledger, table, "missing-id").copy()
    for c in cols:
        out[c] = out[c].str.strip()
    return out


def _load_demographic(cfg, df, ledger):
    df = _ids(df, ledger, "demographic", ["patient_id"])
    df = _times(cfg, df, "birth_date", ledger, "demographic")
    sex = df["sex"].fillna("").str.strip().str.upper().map({"F": "female", "FEMALE": "female",
                                                            "M": "male", "MALE": "male"})
    df = _drop(df, sex.isna().to_numpy(), ledger, "demographic", "sex", "sex").copy()
    df["sex"] = sex[sex.notna()]
    race = df["race"] if "race" in df.columns else pd.Series("", index=df.index)
    df["race_aa"] = race.fillna("").str.strip().str.lower().isin(cfg.race_aa_values)
    df = df.sort_values(["patient_id", "_row"]).drop_duplicates("patient_id", keep="first")
    return pd.DataFrame({
        "patient_id": df["patient_id"].to_numpy(),
        "birth": df["birth_date"].to_numpy(np.int64),
        "sex": df["sex"].to_numpy(),
        "race_aa": df["race_aa"].to_numpy(bool),
    }).sort_values("patient_id", kind="mergesort").reset_index(drop=True)


def _load_encounter(cfg, df, ledger):
    df = _ids(df, ledger, "encounter", ["encounter_id", "patient_id"])
    df = _times(cfg, df, "admit", ledger, "encounter")
    df = _times(cfg, df, "discharge", ledger, "encounter")
    df = _drop(df, (df["admit"] > df["discharge"]).to_numpy(), ledger, "encounter", "admit-after-discharge",
               "encounter_id")
    df = df.sort_values("_row", kind="mergesort")
    dup = df.duplicated("encounter_id", keep="first").to_numpy()
    df = _drop(df, dup, ledger, "encounter", "duplicate-encounter", "encounter_id")
    disp = pd.Series("unknown", index=df.index)
    if "disposition" in df.columns:
        raw = df["disposition"].fillna("").str.strip().str.lower()
        for cat, values in cfg.dispositions.items():
            disp[raw.isin(values)] = cat
    out = pd.DataFrame({
        "encounter_id": df["encounter_id"].to_numpy(),
        "patient_id": df["patient_id"].to_numpy(),
        "admit": df["admit"].to_numpy(np.int64),
        "discharge": df["discharge"].to_numpy(np.int64),
        "disposition": disp.to_numpy(),
    })
    return out.sort_values(["patient_id", "admit", "encounter_id"], kind="mergesort").reset_index(drop=True)


def _load_lab(cfg, df, ledger):
    df = _ids(df, ledger, "lab", ["patient_id"])
    codes = df["code"].fillna("").str.strip()
    df = df.loc[codes.isin(cfg.creatinine_codes).to_numpy()]
    ledger.rows["lab:creatinine"] = int(len(df))
    df = _times(cfg, df, "time", ledger, "lab")
    value = pd.to_numeric(df["value"], errors="coerce")
    df = _drop(df, (value.isna() | ~np.isfinite(value)).to_numpy(), ledger, "lab", "value", "value").copy()
    value = value.loc[df.index].astype(float)
    unit = df["unit"].fillna("").str.strip().str.lower() if "unit" in df.columns else pd.Series("", index=df.index)
    unit = unit.str.replace("µ", "u").str.replace("μ", "u")
    mgdl = unit.isin(["", "mg/dl"])
    umol = unit.isin(["umol/l"])
    df = _drop(df, ~(mgdl | umol).to_numpy(), ledger, "lab", "unit", "unit" if "unit" in df.columns else None)
    value = value.loc[df.index].where(mgdl.loc[df.index], value.loc[df.index] / SCR_UMOL_PER_MGDL)
    lo, hi = SCR_PLAUSIBLE
    bad = ((value <= lo) | (value >= hi)).to_numpy()
    if bad.any():
        ledger.add("lab", "implausible-creatinine", df.loc[bad, "_row"].to_numpy(), value[bad].tolist())
    df, value = df.loc[~bad], value[~bad]
    out = pd.DataFrame({
        "patient_id": df["patient_id"].to_numpy(),
        "time": df["time"].to_numpy(np.int64),
        "value": value.to_numpy(float),
    })
    return out.sort_values(["patient_id", "time", "value"], kind="mergesort").reset_index(drop=True)


def _load_codes(cfg, df, ledger, table, context):
    df = _ids(df, ledger, table, ["patient_id"])
    df = _times(cfg, df, "date", ledger, table)
    code = df["code"].fillna("").map(normalize_code)
    df = _drop(df, (code == "").to_numpy(), ledger, table, "empty-code").copy()
    system = df["system"].fillna("").str.strip().str.upper().map(
        {str(k).upper(): v for k, v in cfg.code_systems.items()})
    df = _drop(df, system.isna().to_numpy(), ledger, table, "code-system", "system")
    out = pd.DataFrame({
        "patient_id": df["patient_id"].to_numpy(),
        "date": (df["date"].to_numpy(np.int64) // DAY) * DAY,
        "system": system.loc[df.index].to_numpy(),
        "code": code.loc[df.index].to_numpy(),
        "context": context,
    })
    return out


def _load_meds(cfg, df, ledger):
    df = _ids(df, ledger, "medication", ["patient_id"])
    df = _times(cfg, df, "time", ledger, "medication")
    name = df["name"].fillna("").str.strip()
    out = pd.DataFrame({"patient_id": df["patient_id"].to_numpy(), "time": df["time"].to_numpy(np.int64),
                        "name": name.to_numpy()})
    return out.sort_values(["patient_id", "time", "name"], kind="mergesort").reset_index(drop=True)


def _load_death(cfg, df, ledger):
    df = _ids(df, ledger, "death", ["patient_id"])
    df = _times(cfg, df, "death_date", ledger, "death")
    out = df.groupby("patient_id", sort=True)["death_date"].min().reset_index()
    return pd.DataFrame({"patient_id": out["patient_id"].to_numpy(), "death": out["death_date"].to_numpy(np.int64)})


def load_cohort(config: IngestConfig, threads: int = 1) -> CohortStore:
    """Read, validate and link all configured tables.

    Raises ``IngestError`` (kind "data") when a required file is missing or
    a table's parse-failure fraction exceeds the tolerance, and (kind
    "config") when a mapped column is absent from a header.
    """
    names = [n for n in REQUIRED_COLUMNS if n in config.tables]
    for n in REQUIRED_TABLES:
        if n not in names:
            raise IngestError(f"required table {n!r} not configured", "config")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            raw = dict(zip(names, pool.map(lambda n: _read_table(config, n), names)))
    else:
        raw = {n: _read_table(config, n) for n in names}

    ledger = ErrorLedger(config.max_error_samples)
    for n, df in raw.items():
        ledger.rows[n] = int(len(df))
    patients = _load_demographic(config, raw["demographic"], ledger)
    encounters = _load_encounter(config, raw["encounter"], ledger)
    labs = _load_lab(config, raw["lab"], ledger)
    code_parts = []
    if "diagnosis" in raw:
        code_parts.append(_load_codes(config, raw["diagnosis"], ledger, "diagnosis", "diagnosis"))
    if "procedure" in raw:
        code_parts.append(_load_codes(config, raw["procedure"], ledger, "procedure", "procedure"))
    codes = pd.concat(code_parts, ignore_index=True) if code_parts else pd.DataFrame(
        {"patient_id": [], "date": np.array([], np.int64), "system": [], "code": [], "context": []})
    codes = codes.sort_values(["patient_id", "date", "context", "system", "code"], kind="mergesort")
    codes = codes.reset_index(drop=True)
    meds = _load_meds(config, raw["medication"], ledger) if "medication" in raw else pd.DataFrame(
        {"patient_id": [], "time": np.array([], np.int64), "name": []})
    deaths = _load_death(config, raw["death"], ledger) if "death" in raw else pd.DataFrame(
        {"patient_id": [], "death": np.array([], np.int64)})

    orphan = ~encounters["patient_id"].isin(patients["patient_id"])
    if orphan.any():
        ledger.add("encounter", "unknown-patient", np.flatnonzero(orphan.to_numpy()),
                   encounters.loc[orphan, "encounter_id"].tolist())
        encounters = encounters.loc[~orphan].reset_index(drop=True)
    # events of unknown patients cannot be keyed; tallied but not counted as parse failures
    known = patients["patient_id"]
    linked = {}
    for table, df in (("lab", labs), ("codes", codes), ("medication", meds), ("death", deaths)):
        bad = ~df["patient_id"].isin(known)
        if bad.any():
            ledger.add(table, "unknown-patient", np.flatnonzero(bad.to_numpy()), None)
            df = df.loc[~bad].reset_index(drop=True)
        linked[table] = df
    labs, codes, meds, deaths = linked["lab"], linked["codes"], linked["medication"], linked["death"]

    for table, reasons in ledger.counts.items():
        failures = sum(n for r, n in reasons.items() if r in PARSE_FAILURES)
        rows = ledger.rows.get(table, 0)
        if rows and failures / rows > config.error_tolerance:
            raise IngestError(
                f"table {table!r}: {failures} of {rows} rows failed to parse "
                f"(tolerance {config.error_tolerance:.2%})", "data")

    return CohortStore(patients, encounters, labs, codes, meds, deaths, ledger.to_dict(),
                       config.mortality_anchor)


# -- cohort filter -------------------------------------------------------------

def patient_index(store: CohortStore, patient_ids) -> np.ndarray:
    """Position of each patient id within ``store.patients`` (sorted)."""
    return np.searchsorted(store.patients["patient_id"].to_numpy(), np.asarray(patient_ids, dtype=object))


_KEY_SHIFT = np.int64(1) << np.int64(34)
_KEY_OFFSET = np.int64(1) << np.int64(33)


def event_keys(pidx: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Monotone int64 key over (patient position, epoch seconds)."""
    return pidx.astype(np.int64) * _KEY_SHIFT + (times.astype(np.int64) + _KEY_OFFSET)


def creatinine_window(encounters: pd.DataFrame):
    admit = encounters["admit"].to_numpy(np.int64)
    end = np.maximum(encounters["discharge"].to_numpy(np.int64), admit + CREATININE_WINDOW_HOURS * HOUR)
    return admit, end


def lab_bounds(store: CohortStore, encounters: pd.DataFrame, lo: np.ndarray, hi: np.ndarray):
    """Index range [start, stop) into ``store.labs`` of each encounter's labs with lo <= t <= hi."""
    keys = event_keys(patient_index(store, store.labs["patient_id"]), store.labs["time"].to_numpy())
    pidx = patient_index(store, encounters["patient_id"])
    start = np.searchsorted(keys, event_keys(pidx, lo), side="left")
    stop = np.searchsorted(keys, event_keys(pidx, hi), side="right")
    return start, stop


def apply_cohort_filters(store: CohortStore):
    """Keep adult encounters with creatinine during the stay or within 48 h of admission.

    Returns ``(filtered_store, tally)``; reasons are applied in order (age,
    then no-creatinine) so each excluded encounter carries exactly one.
    """
    enc = store.encounters
    pat = store.patients.set_index("patient_id")
    birth = pat.loc[enc["patient_id"], "birth"].to_numpy(np.int64)
    admit = enc["admit"].to_numpy(np.int64)
    ages = np.fromiter((age_in_years(int(b), int(a)) for b, a in zip(birth, admit)), dtype=np.int64,
                       count=len(enc))
    adult = ages >= MIN_AGE
    lo, hi = creatinine_window(enc)
    start, stop = lab_bounds(store, enc, lo, hi)
    has_scr = stop > start
    keep = adult & has_scr
    tally = {
        "loaded": int(len(enc)),
        "excluded": {"age": int((~adult).sum()), "no-creatinine": int((adult & ~has_scr).sum())},
        "included": int(keep.sum()),
        "order": ["age", "no-creatinine"],
    }
    return store.with_encounters(enc.loc[keep]), tally
