"""Kaplan-Meier curves, the log-rank test, Cox proportional hazards with
Efron or Breslow ties, and Harrell's concordance index."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ._newton import ModelFit, NonConvergenceError, collinear_columns, covariance_from_hessian, newton_maximize

TIES = ("efron", "breslow")
Z95 = float(sps.norm.ppf(0.975))


def _survival_arrays(time, event, weights=None):
    t = np.asarray(time, float)
    e = np.asarray(event).astype(bool)
    if t.ndim != 1 or e.shape != t.shape:
        raise ValueError("time and event must be 1-D arrays of equal length")
    if np.any(~np.isfinite(t)) or np.any(t < 0):
        raise ValueError("survival times must be finite and nonnegative")
    if weights is None:
        w = np.ones(len(t))
    else:
        w = np.asarray(weights, float)
        if w.shape != t.shape or np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("weights must be finite and positive, one per subject")
    return t, e, w


# -- Kaplan-Meier ---------------------------------------------------------------

@dataclass
class KmCurve:
    times: np.ndarray
    survival: np.ndarray
    n_risk: np.ndarray
    n_events: np.ndarray
    variance: np.ndarray  # Greenwood

    def at(self, t) -> np.ndarray:
        """Right-continuous step function S(t)."""
        t = np.atleast_1d(np.asarray(t, float))
        if len(self.times) == 0:
            return np.ones(len(t))
        idx = np.searchsorted(self.times, t, side="right") - 1
        return np.where(idx >= 0, self.survival[np.clip(idx, 0, None)], 1.0)

    def ci(self, z: float = Z95):
        se = np.sqrt(self.variance) * self.survival
        return np.clip(self.survival - z * se, 0, 1), np.clip(self.survival + z * se, 0, 1)

    def to_dict(self) -> dict:
        return {k: [float(v) for v in getattr(self, k)] for k in ("times", "survival", "n_risk", "n_events")}


def km_estimate(time, event, weights=None) -> KmCurve:
    """(Weighted) product-limit estimate evaluated at each distinct event time."""
    t, e, w = _survival_arrays(time, event, weights)
    order = np.argsort(t, kind="stable")
    t, e, w = t[order], e[order], w[order]
    ut = np.unique(t[e])
    if len(ut) == 0:
        z = np.zeros(0)
        return KmCurve(z, z, z, z, z)
    risk_cum = np.cumsum(w[::-1])[::-1]
    n_risk = risk_cum[np.searchsorted(t, ut, side="left")]
    d = np.zeros(len(ut))
    np.add.at(d, np.searchsorted(ut, t[e]), w[e])
    q = 1 - d / n_risk
    surv = np.cumprod(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        gw = np.where(n_risk > d, d / (n_risk * (n_risk - d)), np.inf)
    return KmCurve(ut, surv, n_risk, d, np.cumsum(gw))


class KaplanMeier(BaseEstimator):
    """Estimator wrapper: ``fit(time, event, sample_weight)``, ``predict(t)`` gives S(t)."""

    def fit(self, time, event, sample_weight=None):
        self.curve_ = km_estimate(time, event, sample_weight)
        return self

    def predict(self, t):
        check_is_fitted(self, "curve_")
        return self.curve_.at(t)


# -- log-rank --------------------------------------------------------------------

@dataclass
class LogRankResult:
    statistic: float
    df: int
    p_value: float
    observed: np.ndarray
    expected: np.ndarray
    labels: list = field(default_factory=list)


def log_rank(time, event, groups) -> LogRankResult:
    """Unweighted K-sample log-rank test with the hypergeometric variance."""
    t, e, _ = _survival_arrays(time, event)
    labels, g = np.unique(np.asarray(groups), return_inverse=True)
    K = len(labels)
    O = np.zeros(K)
    E = np.zeros(K)
    ut = np.unique(t[e])
    if K < 2 or len(ut) == 0:
        return LogRankResult(0.0, max(K - 1, 0), 1.0, O, E, labels.tolist())
    V = np.zeros((K, K))
    order = np.argsort(t, kind="stable")
    ts, es, gs = t[order], e[order], g[order]
    # n_k at risk at each event time
    start = np.searchsorted(ts, ut, side="left")
    counts = np.zeros((len(ts) + 1, K))
    counts[np.arange(len(ts)), gs] = 1
    at_risk = np.cumsum(counts[::-1], axis=0)[::-1][start]
    deaths = np.zeros((len(ut), K))
    np.add.at(deaths, (np.searchsorted(ut, ts[es]), gs[es]), 1)
    n = at_risk.sum(axis=1)
    d = deaths.sum(axis=1)
    O = deaths.sum(axis=0)
    frac = at_risk / n[:, None]
    E = (d[:, None] * frac).sum(axis=0)
    c = np.where(n > 1, d * (n - d) / np.where(n > 1, n - 1, 1), 0.0)
    for a in range(K):
        for b in range(K):
            V[a, b] = np.sum(c * frac[:, a] * ((a == b) - frac[:, b]))
    diff = (O - E)[:-1]
    Vr = V[:-1, :-1]
    if not np.any(Vr):
        return LogRankResult(0.0, K - 1, 1.0, O, E, labels.tolist())
    stat = float(diff @ np.linalg.pinv(Vr) @ diff)
    df = int(np.linalg.matrix_rank(Vr))
    return LogRankResult(stat, df, float(sps.chi2.sf(stat, df)) if df > 0 else 1.0, O, E, labels.tolist())


# -- Cox proportional hazards ---------------------------------------------------

@dataclass
class _CoxData:
    x: np.ndarray  # sorted ascending by time
    w: np.ndarray
    start: np.ndarray  # first sorted index of each event time's risk set
    rep: np.ndarray  # event-time index of each Efron term
    frac: np.ndarray
    meanw: np.ndarray  # mean death weight at each event time
    dead_idx: np.ndarray
    dead_grp: np.ndarray


def _prepare_cox(t, e, w, X, ties):
    order = np.lexsort((~e, t))
    t, e, w, X = t[order], e[order], w[order], X[order]
    ut = np.unique(t[e])
    start = np.searchsorted(t, ut, side="left")
    dead_idx = np.flatnonzero(e)
    dead_grp = np.searchsorted(ut, t[dead_idx])
    d = np.bincount(dead_grp, minlength=len(ut))
    wsum = np.bincount(dead_grp, weights=w[dead_idx], minlength=len(ut))
    rep = np.repeat(np.arange(len(ut)), d)
    r = np.arange(len(rep)) - np.repeat(np.cumsum(d) - d, d)
    frac = r / np.repeat(d, d) if ties == "efron" else np.zeros(len(rep))
    return _CoxData(X, w, start, rep, frac, wsum / np.maximum(d, 1), dead_idx, dead_grp), order


def cox_loglik(beta, data: _CoxData):
    """Weighted partial log-likelihood, gradient and Hessian."""
    X, w = data.x, data.w
    p = X.shape[1]
    eta = X @ beta
    eta = eta - eta.max()  # cancels between numerator and denominator
    we = w * np.exp(eta)
    S0 = np.cumsum(we[::-1])[::-1][data.start]
    S1 = np.cumsum((we[:, None] * X)[::-1], axis=0)[::-1][data.start]
    XX = X[:, :, None] * X[:, None, :]
    S2 = np.cumsum((we[:, None, None] * XX)[::-1], axis=0)[::-1][data.start]
    U = len(data.start)
    di, dg = data.dead_idx, data.dead_grp
    D0 = np.bincount(dg, weights=we[di], minlength=U)
    D1 = np.zeros((U, p))
    np.add.at(D1, dg, we[di, None] * X[di])
    D2 = np.zeros((U, p, p))
    np.add.at(D2, dg, we[di, None, None] * XX[di])

    rep, f = data.rep, data.frac
    mw = data.meanw[rep]
    den = S0[rep] - f * D0[rep]
    A = (S1[rep] - f[:, None] * D1[rep]) / den[:, None]
    B = (S2[rep] - f[:, None, None] * D2[rep]) / den[:, None, None]
    ll = float(np.sum(w[di] * eta[di]) - np.sum(mw * np.log(den)))
    grad = (w[di, None] * X[di]).sum(axis=0) - (mw[:, None] * A).sum(axis=0)
    H = -np.einsum("r,rij->ij", mw, B - A[:, :, None] * A[:, None, :])
    return ll, grad, H


@dataclass
class CoxFit(ModelFit):
    ties: str = "efron"
    n: int = 0
    n_events: int = 0

    @property
    def hazard_ratio(self) -> np.ndarray:
        return np.exp(self.coef)

    def hr_ci(self, z: float = Z95):
        return np.exp(self.coef - z * self.se), np.exp(self.coef + z * self.se)

    def wald_p(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            zz = self.coef / self.se
        return 2 * sps.norm.sf(np.abs(zz))

    def to_dict(self) -> dict:
        d = super().to_dict()
        lo, hi = self.hr_ci()
        d.update(ties=self.ties, n=self.n, n_events=self.n_events,
                 hr=[float(v) for v in self.hazard_ratio], hr_lo=[float(v) for v in lo],
                 hr_hi=[float(v) for v in hi], p=[float(v) for v in self.wald_p()])
        return d


def fit_cox(time, event, X, weights=None, ties: str = "efron", names=None) -> CoxFit:
    """Cox PH by Newton-Raphson. Covariates that are constant or collinear
    are rejected by name since their coefficients are not identifiable."""
    if ties not in TIES:
        raise ValueError(f"ties must be one of {TIES}, got {ties!r}")
    t, e, w = _survival_arrays(time, event, weights)
    X = np.asarray(X, float)
    if X.ndim != 2 or X.shape[0] != len(t):
        raise ValueError("X must be 2-D with one row per subject")
    if not np.all(np.isfinite(X)):
        raise ValueError("covariates must be finite")
    names = list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]
    bad = collinear_columns(np.column_stack([np.ones(len(t)), X]), ["(baseline)"] + names)
    if bad:
        from ._newton import RankDeficientError
        raise RankDeficientError(bad)
    if not e.any():
        raise ValueError("no events: Cox coefficients are not estimable")
    data, _ = _prepare_cox(t, e, w, X, ties)
    beta, ll, g, H, it, ok, msg = newton_maximize(lambda b: cox_loglik(b, data), np.zeros(X.shape[1]))
    return CoxFit(beta, covariance_from_hessian(H), ll, it, ok, names,
                  float(np.max(np.abs(g))) if g.size else 0.0, msg, ties, len(t), int(e.sum()))


class CoxPHModel(BaseEstimator):
    """Cox model estimator. ``fit(X, y)`` takes ``y`` as an (n, 2) array of
    (time, event); ``predict`` returns the linear risk score and ``score``
    Harrell's C."""

    def __init__(self, ties="efron", strict=False):
        self.ties = ties
        self.strict = strict

    def fit(self, X, y, sample_weight=None, feature_names=None):
        X = check_array(X, dtype=float)
        y = np.asarray(y, float)
        if y.ndim != 2 or y.shape != (len(X), 2):
            raise ValueError("y must be an (n, 2) array of (time, event)")
        self.fit_ = fit_cox(y[:, 0], y[:, 1], X, sample_weight, self.ties, feature_names)
        if self.strict and not self.fit_.converged:
            raise NonConvergenceError(f"Cox model did not converge: {self.fit_.message}")
        self.coef_ = self.fit_.coef.copy()
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return check_array(X, dtype=float) @ self.coef_

    def score(self, X, y):
        y = np.asarray(y, float)
        return harrell_c(y[:, 0], y[:, 1], self.predict(X))


# -- concordance -----------------------------------------------------------------

def harrell_c(time, event, risk) -> float:
    """Harrell's C: over pairs with an event at the strictly earlier time,
    the share where the earlier subject has the higher risk; ties in risk
    count one half. O(n log n) with a Fenwick tree over risk ranks."""
    t, e, _ = _survival_arrays(time, event)
    r = np.asarray(risk, float)
    if r.shape != t.shape or np.any(~np.isfinite(r)):
        raise ValueError("risk must be finite, one per subject")
    ranks = np.unique(r, return_inverse=True)[1] + 1
    m = int(ranks.max()) if len(ranks) else 0
    tree = [0] * (m + 1)

    def add(i):
        while i <= m:
            tree[i] += 1
            i += i & -i

    def prefix(i):
        s = 0
        while i > 0:
            s += tree[i]
            i -= i & -i
        return s

    order = np.argsort(-t, kind="stable")
    ts = t[order]
    bounds = np.flatnonzero(np.r_[True, ts[1:] != ts[:-1], True])
    conc2 = 0  # twice the concordant count, so ties add 1
    pairs = 0
    inserted = 0
    for a, b in zip(bounds[:-1], bounds[1:]):
        grp = order[a:b]
        for i in grp[e[grp]]:
            k = int(ranks[i])
            below = prefix(k - 1)
            same = prefix(k) - below
            conc2 += 2 * below + same
            pairs += inserted
        for i in grp:
            add(int(ranks[i]))
        inserted += len(grp)
    if pairs == 0:
        return float("nan")
    return conc2 / (2 * pairs)
