"""Time conversion and input validation helpers shared across modules.

All engine-level timestamps are integer seconds since the Unix epoch
("epoch seconds"). Integer arithmetic keeps the 48 h / 7 d window
boundaries exact.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import math
from typing import Iterable

import numpy as np
import pandas as pd

HOUR = 3600
DAY = 24 * HOUR
YEAR_DAYS = 365

# Tolerance for threshold comparisons on decimal lab values (0.3 mg/dL, 1.5x ...).
# 1.3 - 1.0 is 0.30000000000000004 but 2.3 - 2.0 is 0.2999999999999998.
EPS = 1e-9


def to_epoch(value) -> int:
    """Convert a datetime-like value to epoch seconds."""
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return int(value)
    if isinstance(value, _dt.date) and not isinstance(value, _dt.datetime):
        value = _dt.datetime(value.year, value.month, value.day)
    ts = pd.Timestamp(value)
    if ts is pd.NaT:
        raise ValueError(f"cannot convert {value!r} to a timestamp")
    if ts.tzinfo is not None:
        ts = ts.tz_convert("UTC").tz_localize(None)
    return int(ts.value // 1_000_000_000)


def epoch_to_iso(seconds: int | None) -> str | None:
    if seconds is None:
        return None
    return _dt.datetime.fromtimestamp(int(seconds), tz=_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%S")


def day_floor(seconds: int) -> int:
    """Midnight (epoch seconds) of the calendar day containing ``seconds``."""
    return (int(seconds) // DAY) * DAY


def days_between(start: int, end: int) -> int:
    """Whole calendar days from the date of ``start`` to the date of ``end``."""
    return (day_floor(end) - day_floor(start)) // DAY


def series_to_epoch(values: pd.Series) -> np.ndarray:
    """datetime64 series -> int64 epoch seconds (NaT must already be removed)."""
    return values.to_numpy(dtype="datetime64[s]").astype(np.int64)


def age_in_years(birth: int, at: int) -> int:
    """Completed years between two epoch-second instants (date resolution)."""
    b = _dt.datetime.fromtimestamp(birth, tz=_dt.timezone.utc).date()
    a = _dt.datetime.fromtimestamp(at, tz=_dt.timezone.utc).date()
    years = a.year - b.year
    if (a.month, a.day) < (b.month, b.day):
        years -= 1
    return years


def normalize_code(code) -> str:
    """Uppercase and strip dots/whitespace: ICD '96.70' -> '9670'."""
    return str(code).strip().upper().replace(".", "")


def check_finite_positive(x: float, name: str) -> float:
    x = float(x)
    if not math.isfinite(x) or x <= 0:
        raise ValueError(f"{name} must be a finite positive number, got {x!r}")
    return x


def check_probabilities(p: Iterable[float]) -> np.ndarray:
    arr = np.asarray(list(p) if not isinstance(p, np.ndarray) else p, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
        raise ValueError("p-values must lie in [0, 1]")
    return arr


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
