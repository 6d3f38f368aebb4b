"""Run configuration: one YAML file with a section per stage."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import yaml

from ._util import sha256_bytes, to_epoch
from .codemaps import CodeMap, CodeMapError, load_codemap
from .engine import KdigoParams
from .ingest import IngestConfig, IngestError
from .stats.survival import TIES
from .synth import GeneratorConfig, GeneratorConfigError


class ConfigError(ValueError):
    pass


_number = {"type": "number", "exclusiveMinimum": 0}

RUN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "ingest": {"type": "object"},
        "codemap": {"type": ["string", "null"]},
        "engine": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "abs_rise": _number,
                "abs_window_hours": {"type": "integer", "minimum": 1},
                "rel_window_days": {"type": "integer", "minimum": 1},
                "stage1_ratio": _number,
                "stage2_ratio": _number,
                "stage3_ratio": _number,
                "rapid_reversal_hours": {"type": "integer", "minimum": 1},
            },
        },
        "outcomes": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mortality_anchor": {"enum": ["admission", "discharge"]},
                "admin_end": {"type": ["string", "null"]},
            },
        },
        "stats": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ties": {"enum": list(TIES)},
                "ipw_floor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "km_times": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "strict_models": {"type": "boolean"},
            },
        },
        "synth": {"type": "object"},
    },
}


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    ingest: IngestConfig
    codemap: CodeMap
    engine: KdigoParams
    mortality_anchor: str = "admission"
    admin_end: int | None = None
    ties: str = "efron"
    ipw_floor: float = 1e-6
    km_times: tuple = (30.0, 365.0, 1095.0)
    strict_models: bool = False
    synth: dict = field(default_factory=dict)

    def digest(self) -> str:
        """Hash of the effective settings plus the code-list version and content."""
        payload = {"raw": self.raw, "codemap": [self.codemap.version, self.codemap.digest()]}
        return sha256_bytes(json.dumps(payload, sort_keys=True, default=str).encode())

    def generator(self, seed: int | None = None, n: int | None = None) -> GeneratorConfig:
        raw = dict(self.synth)
        if seed is not None:
            raw["seed"] = seed
        if n is not None:
            raw["n"] = n
        try:
            return GeneratorConfig.from_dict(raw)
        except GeneratorConfigError as exc:
            raise ConfigError(f"synth: {exc}") from None


def build_config(raw: dict | None, input_dir=".", overrides: dict | None = None) -> RunConfig:
    """Validate ``raw`` (the parsed YAML) and resolve every section.

    ``overrides`` maps dotted keys such as ``"stats.ties"`` to values that
    replace the file's settings (used for command-line flags).
    """
    raw = copy.deepcopy(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, name = key.split(".", 1)
        raw.setdefault(section, {})[name] = value
    try:
        jsonschema.validate(raw, RUN_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at '{path}': {exc.message}") from None

    out = raw.get("outcomes", {})
    anchor = out.get("mortality_anchor")
    ingest_raw = dict(raw.get("ingest", {}))
    if anchor is not None:
        ingest_raw["mortality_anchor"] = anchor
    try:
        ingest = IngestConfig.from_dict(ingest_raw, base_dir=input_dir)
    except IngestError as exc:
        raise ConfigError(str(exc)) from None
    try:
        codemap = load_codemap(raw.get("codemap"))
    except (CodeMapError, OSError) as exc:
        raise ConfigError(f"code map: {exc}") from None
    eng = raw.get("engine", {})
    params = KdigoParams(**{**KdigoParams().__dict__, **eng})
    if not params.stage1_ratio < params.stage2_ratio < params.stage3_ratio:
        raise ConfigError("engine stage ratios must increase")
    admin_end = out.get("admin_end")
    if admin_end is not None:
        try:
            admin_end = to_epoch(admin_end)
        except ValueError as exc:
            raise ConfigError(f"outcomes.admin_end: {exc}") from None
    st = raw.get("stats", {})
    cfg = RunConfig(
        raw=raw,
        ingest=ingest,
        codemap=codemap,
        engine=params,
        mortality_anchor=ingest.mortality_anchor,
        admin_end=admin_end,
        ties=st.get("ties", "efron"),
        ipw_floor=float(st.get("ipw_floor", 1e-6)),
        km_times=tuple(float(t) for t in st.get("km_times", (30, 365, 1095))),
        strict_models=bool(st.get("strict_models", False)),
        synth=dict(raw.get("synth", {})),
    )
    cfg.generator()  # validate the synth section eagerly
    return cfg


def load_config(path, input_dir=".", overrides: dict | None = None) -> RunConfig:
    """Read and validate a run configuration; a missing path gives the defaults."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
    return build_config(raw, input_dir, overrides)
