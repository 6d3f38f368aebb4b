"""Group comparison tests and multiplicity correction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import stats as sps


@dataclass(frozen=True)
class TestResult:
    test: str
    statistic: float
    p_value: float
    df: float | None = None

    def to_dict(self) -> dict:
        return {"test": self.test, "statistic": float(self.statistic), "p_value": float(self.p_value),
                "df": None if self.df is None else float(self.df)}


def _groups(samples):
    out = [np.asarray(s, float) for s in samples]
    for s in out:
        if np.any(~np.isfinite(s)):
            raise ValueError("samples must be finite")
    return [s for s in out if len(s)]


def kruskal_wallis(*samples) -> TestResult:
    """Kruskal-Wallis H with midranks and the tie correction."""
    groups = _groups(samples)
    k = len(groups)
    if k < 2:
        return TestResult("kruskal-wallis", 0.0, 1.0, max(k - 1, 0))
    allv = np.concatenate(groups)
    n = len(allv)
    ranks = sps.rankdata(allv)
    _, counts = np.unique(allv, return_counts=True)
    ties = 1 - float(np.sum(counts ** 3 - counts)) / (n ** 3 - n) if n > 1 else 0.0
    if ties <= 0:
        return TestResult("kruskal-wallis", 0.0, 1.0, k - 1)
    h = 0.0
    pos = 0
    for g in groups:
        r = ranks[pos:pos + len(g)]
        pos += len(g)
        h += r.sum() ** 2 / len(g)
    h = (12.0 / (n * (n + 1)) * h - 3 * (n + 1)) / ties
    h = max(h, 0.0)
    return TestResult("kruskal-wallis", h, float(sps.chi2.sf(h, k - 1)), k - 1)


def anova_oneway(*samples) -> TestResult:
    """One-way ANOVA F. Zero within-group variance gives F=inf (p=0) when
    the means differ and F=0 (p=1) when they do not."""
    groups = _groups(samples)
    k = len(groups)
    n = sum(len(g) for g in groups)
    if k < 2 or n <= k:
        return TestResult("anova", 0.0, 1.0, None)
    grand = np.concatenate(groups).mean()
    ssb = sum(len(g) * (g.mean() - grand) ** 2 for g in groups)
    ssw = sum(float(np.sum((g - g.mean()) ** 2)) for g in groups)
    df1, df2 = k - 1, n - k
    if ssw == 0:
        return TestResult("anova", math.inf if ssb > 0 else 0.0, 0.0 if ssb > 0 else 1.0, df1)
    f = (ssb / df1) / (ssw / df2)
    return TestResult("anova", f, float(sps.f.sf(f, df1, df2)), df1)


def chi_square(table) -> TestResult:
    """Pearson chi-square for an r x c table (no continuity correction).
    All-zero rows and columns are dropped first."""
    t = np.asarray(table, float)
    if t.ndim != 2 or np.any(t < 0) or np.any(~np.isfinite(t)):
        raise ValueError("table must be a 2-D array of nonnegative counts")
    t = t[t.sum(axis=1) > 0][:, t.sum(axis=0) > 0]
    if t.shape[0] < 2 or t.shape[1] < 2:
        return TestResult("chi-square", 0.0, 1.0, 0)
    exp = np.outer(t.sum(axis=1), t.sum(axis=0)) / t.sum()
    stat = float(np.sum((t - exp) ** 2 / exp))
    df = (t.shape[0] - 1) * (t.shape[1] - 1)
    return TestResult("chi-square", stat, float(sps.chi2.sf(stat, df)), df)


def fisher_exact(table) -> TestResult:
    """Two-sided Fisher exact test on a 2x2 table.

    Tables with the observed margins are summed when their hypergeometric
    probability does not exceed the observed one; the comparison is done
    on exact integers so there is no floating-point tolerance.
    """
    t = np.asarray(table)
    if t.shape != (2, 2):
        raise ValueError(f"Fisher exact test needs a 2x2 table, got shape {t.shape}")
    if np.any(t < 0) or np.any(t != np.floor(t)):
        raise ValueError("cells must be nonnegative integers")
    (a, b), (c, d) = [[int(v) for v in row] for row in t]
    r1, r2, c1 = a + b, c + d, a + c
    n = r1 + r2
    if min(r1, r2, c1, n - c1) == 0:
        return TestResult("fisher", math.nan, 1.0, None)
    lo, hi = max(0, c1 - r2), min(r1, c1)
    num = {x: math.comb(r1, x) * math.comb(r2, c1 - x) for x in range(lo, hi + 1)}
    obs = num[a]
    p = Fraction(sum(v for v in num.values() if v <= obs), math.comb(n, c1))
    odds = (a * d) / (b * c) if b * c else math.inf
    return TestResult("fisher", odds, float(min(p, Fraction(1))), None)


def bonferroni(p_values, m: int | None = None) -> np.ndarray:
    """min(1, m * p), with m the number of comparisons (default len(p))."""
    p = np.asarray(p_values, float)
    m = len(p) if m is None else int(m)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    return np.minimum(1.0, m * p)


def continuous_test(samples, kind: str) -> TestResult:
    """KW for skewed variables summarised as median (IQR), ANOVA for mean (SD)."""
    if kind == "median_iqr":
        return kruskal_wallis(*samples)
    if kind == "mean_sd":
        return anova_oneway(*samples)
    raise ValueError(f"no continuous test for summary kind {kind!r}")


def categorical_test(table) -> TestResult:
    """Fisher for 2x2 tables with an expected count below 5, otherwise chi-square."""
    t = np.asarray(table, float)
    if t.shape == (2, 2):
        tot = t.sum()
        if tot > 0:
            exp = np.outer(t.sum(axis=1), t.sum(axis=0)) / tot
            if np.any(exp < 5):
                return fisher_exact(t.astype(int))
    return chi_square(t)
