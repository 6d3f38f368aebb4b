"""Code lists (ICU, ventilation, KRT, renal history, Charlson) and matching.

Each named list and each Charlson category becomes one bit of an int64
mask, so a cohort's coded events can be classified once and then queried
with bitwise tests.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from ._util import normalize_code

CODE_SYSTEMS = ("ICD9", "ICD10", "CPT")
NEPHROTOXIN_GROUPS = (
    "aminoglycosides",
    "diuretics",
    "vancomycin",
    "acei_arb",
    "nsaids",
    "vasopressors_inotropes",
)
VASOPRESSOR_GROUP = "vasopressors_inotropes"
CHARLSON_WEIGHTS = (1, 2, 3, 6)
CONTEXTS = ("diagnosis", "procedure", "any")

_code_block = {
    "type": "object",
    "propertyNames": {"enum": list(CODE_SYSTEMS) + ["any"]},
    "additionalProperties": {"type": "array", "items": {"type": "string", "minLength": 1}},
}

CODEMAP_SCHEMA = {
    "type": "object",
    "required": ["version", "lists", "charlson", "nephrotoxins"],
    "properties": {
        "version": {"type": "string"},
        "lists": {
            "type": "object",
            "required": ["icu", "vent", "krt", "ckd", "aki", "transplant"],
            "additionalProperties": {
                "type": "object",
                "required": ["match", "codes"],
                "properties": {
                    "match": {"enum": ["exact", "prefix"]},
                    "context": {"enum": list(CONTEXTS)},
                    "codes": _code_block,
                },
            },
        },
        "charlson": {
            "type": "object",
            "required": ["categories"],
            "properties": {
                "lookback_days": {"type": "integer", "minimum": 1},
                "hierarchy": {
                    "type": "array",
                    "items": {"type": "array", "items": {"type": "string"}, "minItems": 2, "maxItems": 2},
                },
                "categories": {
                    "type": "object",
                    "minProperties": 1,
                    "additionalProperties": {
                        "type": "object",
                        "required": ["weight", "codes"],
                        "properties": {"weight": {"enum": list(CHARLSON_WEIGHTS)}, "codes": _code_block},
                    },
                },
            },
        },
        "nephrotoxins": {
            "type": "object",
            "required": list(NEPHROTOXIN_GROUPS),
            "additionalProperties": False,
            "properties": {
                g: {"type": "array", "items": {"type": "string", "minLength": 1}, "minItems": 1}
                for g in NEPHROTOXIN_GROUPS
            },
        },
    },
}


class CodeMapError(ValueError):
    pass


def expand_range(pattern: str) -> list[str]:
    """'N032-N037' -> ['N032', ..., 'N037']; a plain code is returned as is."""
    pattern = pattern.strip()
    if "-" not in pattern:
        return [normalize_code(pattern)]
    lo, hi = (normalize_code(p) for p in pattern.split("-", 1))
    if len(lo) != len(hi):
        raise CodeMapError(f"range ends differ in length: {pattern!r}")
    k = 0
    while k < len(lo) and lo[k] == hi[k]:
        k += 1
    head, a, b = lo[:k], lo[k:], hi[k:]
    if not (a.isdigit() and b.isdigit()) or int(a) > int(b):
        raise CodeMapError(f"cannot expand code range {pattern!r}")
    width = len(a)
    return [f"{head}{i:0{width}d}" for i in range(int(a), int(b) + 1)]


@dataclass(frozen=True)
class _Rule:
    bit: int
    exact: bool
    context: str
    by_system: dict  # system or "any" -> frozenset of normalized codes


class CodeMap:
    """Compiled code lists; see ``data/codemap_default.yaml`` for the format."""

    def __init__(self, raw: dict):
        try:
            jsonschema.validate(raw, CODEMAP_SCHEMA)
        except jsonschema.ValidationError as exc:
            path = "/".join(str(p) for p in exc.absolute_path)
            raise CodeMapError(f"code map invalid at '{path}': {exc.message}") from None
        self.raw = raw
        self.version = raw["version"]
        charlson = raw["charlson"]
        self.lookback_days = int(charlson.get("lookback_days", 365))
        self.list_names = tuple(raw["lists"])
        self.charlson_names = tuple(charlson["categories"])
        names = self.list_names + tuple(f"cci:{c}" for c in self.charlson_names)
        if len(names) > 63:
            raise CodeMapError("too many code lists for a 64-bit mask")
        self.bits = {n: i for i, n in enumerate(names)}
        self.weights = {c: int(v["weight"]) for c, v in charlson["categories"].items()}
        self.hierarchy = []
        for sup, sub in charlson.get("hierarchy", []):
            for c in (sup, sub):
                if c not in self.weights:
                    raise CodeMapError(f"hierarchy names unknown Charlson category {c!r}")
            self.hierarchy.append((sup, sub))

        rules = []
        for name, spec in raw["lists"].items():
            rules.append(self._compile(
                self.bits[name], spec["match"] == "exact", spec.get("context", "any"), spec["codes"]))
        for name, spec in charlson["categories"].items():
            rules.append(self._compile(self.bits[f"cci:{name}"], False, "diagnosis", spec["codes"]))
        self._rules = rules
        self.nephrotoxins = {g: tuple(s.lower() for s in raw["nephrotoxins"][g]) for g in NEPHROTOXIN_GROUPS}
        self._cache: dict = {}

    @staticmethod
    def _compile(bit, exact, context, codes):
        by_system = {}
        for system, patterns in codes.items():
            expanded = set()
            for p in patterns:
                expanded.update(expand_range(p))
            by_system[system] = frozenset(expanded)
        return _Rule(bit, exact, context, by_system)

    @classmethod
    def from_file(cls, path) -> "CodeMap":
        with open(path) as fh:
            return cls(yaml.safe_load(fh))

    @classmethod
    def default(cls) -> "CodeMap":
        text = resources.files("akitraj").joinpath("data/codemap_default.yaml").read_text()
        return cls(yaml.safe_load(text))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()

    def bit(self, name: str) -> int:
        return 1 << self.bits[name]

    def match_one(self, system: str, code: str, context: str = "diagnosis") -> int:
        key = (system, code, context)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        mask = 0
        prefixes = {code[:k] for k in range(1, len(code) + 1)}
        for rule in self._rules:
            if rule.context != "any" and rule.context != context:
                continue
            for s in (system, "any"):
                pool = rule.by_system.get(s)
                if not pool:
                    continue
                if (code in pool) if rule.exact else not prefixes.isdisjoint(pool):
                    mask |= 1 << rule.bit
                    break
        self._cache[key] = mask
        return mask

    def match(self, systems, codes, context="diagnosis") -> np.ndarray:
        """Bit masks for arrays of (system, normalized code) pairs.

        ``context`` is one string for all rows or an array of per-row values.
        """
        systems = np.asarray(systems, dtype=object)
        codes = np.asarray(codes, dtype=object)
        if systems.size == 0:
            return np.zeros(0, dtype=np.int64)
        ctx = np.broadcast_to(np.asarray(context, dtype=object), systems.shape)
        keys = [f"{s}|{c}|{x}" for s, c, x in zip(systems, codes, ctx)]
        uniq, inv = np.unique(np.asarray(keys, dtype=object), return_inverse=True)
        masks = np.empty(len(uniq), dtype=np.int64)
        for i, k in enumerate(uniq):
            s, c, x = k.split("|")
            masks[i] = self.match_one(s, c, x)
        return masks[inv]

    def medication_groups(self, names) -> np.ndarray:
        """Nephrotoxin group mask (bit i = NEPHROTOXIN_GROUPS[i]) per medication name."""
        names = np.asarray(names, dtype=object)
        if names.size == 0:
            return np.zeros(0, dtype=np.int64)
        uniq, inv = np.unique(names.astype(str), return_inverse=True)
        masks = np.zeros(len(uniq), dtype=np.int64)
        for i, n in enumerate(uniq):
            low = n.lower()
            for j, g in enumerate(NEPHROTOXIN_GROUPS):
                if any(s in low for s in self.nephrotoxins[g]):
                    masks[i] |= 1 << j
        return masks[inv]

    def charlson_from_mask(self, mask: int) -> int:
        """Weighted Charlson score from an OR-ed mask of matched categories."""
        present = {c for c in self.charlson_names if mask & self.bit(f"cci:{c}")}
        for sup, sub in self.hierarchy:
            if sup in present:
                present.discard(sub)
        return sum(self.weights[c] for c in present)


def load_codemap(path=None) -> CodeMap:
    return CodeMap.default() if path is None else CodeMap.from_file(Path(path))
