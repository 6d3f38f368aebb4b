"""Logistic and multinomial logistic regression by Newton-Raphson, and
inverse-probability weights from a fitted multinomial propensity model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._newton import ModelFit, check_full_rank, covariance_from_hessian, newton_maximize

PROBABILITY_FLOOR = 1e-6


def _weights(w, n):
    if w is None:
        return np.ones(n)
    w = np.asarray(w, float)
    if w.shape != (n,) or np.any(~np.isfinite(w)) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be finite, nonnegative, not all zero, one per row")
    return w


def _names(names, p, prefix="x"):
    return list(names) if names is not None else [f"{prefix}{j}" for j in range(p)]


def logistic_loglik(beta, X, y, w):
    """Log-likelihood, gradient and Hessian of the weighted logistic model."""
    eta = X @ beta
    ll = float(np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta))))
    p = expit(eta)
    grad = X.T @ (w * (y - p))
    H = -(X * (w * p * (1 - p))[:, None]).T @ X
    return ll, grad, H


def fit_logistic(X, y, weights=None, names=None) -> ModelFit:
    """Binary logistic MLE. ``X`` must already contain an intercept column if wanted."""
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be 2-D with one row per outcome")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must be binary 0/1")
    w = _weights(weights, len(y))
    names = _names(names, X.shape[1])
    check_full_rank(X, names)
    beta, ll, g, H, it, ok, msg = newton_maximize(lambda b: logistic_loglik(b, X, y, w), np.zeros(X.shape[1]))
    return ModelFit(beta, covariance_from_hessian(H), ll, it, ok, names, float(np.max(np.abs(g))), msg)


def _onehot(g, K):
    Y = np.zeros((len(g), K))
    Y[np.arange(len(g)), g] = 1.0
    return Y


def multinomial_loglik(beta, X, Y, w):
    """Weighted softmax log-likelihood with category 0 fixed at zero.

    ``beta`` is the flattened (K-1, p) coefficient block, category-major.
    """
    n, p = X.shape
    K = Y.shape[1]
    B = beta.reshape(K - 1, p)
    eta = np.concatenate([np.zeros((n, 1)), X @ B.T], axis=1)
    lse = logsumexp(eta, axis=1)
    ll = float(np.sum(w * (np.sum(Y * eta, axis=1) - lse)))
    P = np.exp(eta - lse[:, None])
    R = (Y - P)[:, 1:] * w[:, None]
    grad = (R.T @ X).reshape(-1)
    Pk = P[:, 1:]
    H = np.empty(((K - 1) * p, (K - 1) * p))
    for a in range(K - 1):
        for b in range(a, K - 1):
            c = Pk[:, a] * ((a == b) - Pk[:, b]) * w
            blk = -(X * c[:, None]).T @ X
            H[a * p:(a + 1) * p, b * p:(b + 1) * p] = blk
            H[b * p:(b + 1) * p, a * p:(a + 1) * p] = blk.T
    return ll, grad, H


def fit_multinomial(X, groups, K: int | None = None, weights=None, names=None) -> ModelFit:
    """Multinomial logit MLE; ``groups`` are integer labels 0..K-1 with 0 the reference."""
    X = np.asarray(X, float)
    g = np.asarray(groups)
    if not np.issubdtype(g.dtype, np.integer):
        raise ValueError("group labels must be integers 0..K-1")
    K = int(g.max()) + 1 if K is None else int(K)
    if K < 2:
        raise ValueError("need at least two categories")
    counts = np.bincount(g, minlength=K)
    if len(counts) > K or np.any(counts == 0):
        raise ValueError(f"every category must be observed; counts {counts.tolist()}")
    w = _weights(weights, len(g))
    p = X.shape[1]
    base = _names(names, p)
    check_full_rank(X, base)
    Y = _onehot(g, K)
    beta, ll, grad, H, it, ok, msg = newton_maximize(
        lambda b: multinomial_loglik(b, X, Y, w), np.zeros((K - 1) * p))
    full = [f"{k}:{n}" for k in range(1, K) for n in base]
    return ModelFit(beta, covariance_from_hessian(H), ll, it, ok, full, float(np.max(np.abs(grad))), msg)


def multinomial_probabilities(fit: ModelFit, X) -> np.ndarray:
    X = np.asarray(X, float)
    p = X.shape[1]
    B = np.asarray(fit.coef).reshape(-1, p)
    eta = np.concatenate([np.zeros((X.shape[0], 1)), X @ B.T], axis=1)
    return softmax(eta, axis=1)


@dataclass
class PropensityWeights:
    weights: np.ndarray
    probabilities: np.ndarray  # fitted probability of each subject's own group
    n_capped: int
    floor: float = PROBABILITY_FLOOR


def ipw_weights(fit: ModelFit | None, X, groups, floor: float = PROBABILITY_FLOOR) -> PropensityWeights:
    """w_i = 1 / P(G_i | x_i); probabilities below ``floor`` are raised to it and counted.

    ``fit`` may be None when only one group is present (all weights 1).
    """
    g = np.asarray(groups)
    if fit is None:
        if len(np.unique(g)) > 1:
            raise ValueError("a propensity fit is required with more than one group")
        ones = np.ones(len(g))
        return PropensityWeights(ones, ones, 0, floor)
    if not fit.converged:
        raise ValueError("propensity model did not converge")
    P = multinomial_probabilities(fit, X)
    own = P[np.arange(len(g)), g]
    capped = own < floor
    own_f = np.where(capped, floor, own)
    return PropensityWeights(1.0 / own_f, own, int(capped.sum()), floor)


# -- estimator wrappers ---------------------------------------------------------

class LogisticMLE(ClassifierMixin, BaseEstimator):
    """Unpenalised logistic regression fitted by Newton-Raphson.

    Unlike sklearn's LogisticRegression there is no regularisation, so the
    coefficients are the maximum-likelihood estimates with Wald standard
    errors in ``fit_.cov``. Non-convergence (e.g. separation) is kept in
    ``fit_.converged`` and raised when ``strict=True``.
    """

    def __init__(self, fit_intercept=True, strict=False):
        self.fit_intercept = fit_intercept
        self.strict = strict

    def _design(self, X):
        return np.column_stack([np.ones(len(X)), X]) if self.fit_intercept else X

    def fit(self, X, y, sample_weight=None, feature_names=None):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = np.unique(y)
        if len(self.classes_) > 2:
            raise ValueError("LogisticMLE is binary; use MultinomialLogitMLE")
        yb = (y == self.classes_[-1]).astype(float) if len(self.classes_) == 2 else (y != 0).astype(float)
        names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X.shape[1])]
        names = (["intercept"] if self.fit_intercept else []) + names
        self.fit_ = fit_logistic(self._design(X), yb, sample_weight, names)
        if self.strict:
            self.fit_.raise_if_not_converged("logistic model")
        k = 1 if self.fit_intercept else 0
        self.intercept_ = float(self.fit_.coef[0]) if self.fit_intercept else 0.0
        self.coef_ = self.fit_.coef[k:].copy()
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "fit_")
        X = check_array(X, dtype=float)
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        idx = (self.predict_proba(X)[:, 1] >= 0.5).astype(int)
        return self.classes_[np.minimum(idx, len(self.classes_) - 1)]


class MultinomialLogitMLE(ClassifierMixin, BaseEstimator):
    """Unpenalised multinomial logit with an explicit reference category.

    ``reference`` names the class whose coefficients are fixed at zero; it
    defaults to the first class in sorted order.
    """

    def __init__(self, reference=None, fit_intercept=True, strict=False):
        self.reference = reference
        self.fit_intercept = fit_intercept
        self.strict = strict

    def _design(self, X):
        return np.column_stack([np.ones(len(X)), X]) if self.fit_intercept else X

    def fit(self, X, y, sample_weight=None):
        X = check_array(X, dtype=float)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("X and y differ in length")
        classes = list(np.unique(y))
        ref = classes[0] if self.reference is None else self.reference
        if ref not in classes:
            raise ValueError(f"reference class {ref!r} not present")
        classes.remove(ref)
        self.classes_ = np.array([ref] + classes, dtype=object if y.dtype == object else y.dtype)
        lookup = {c: i for i, c in enumerate(self.classes_)}
        g = np.array([lookup[v] for v in y])
        self.n_features_in_ = X.shape[1]
        if len(self.classes_) == 1:
            self.fit_ = None
            return self
        self.fit_ = fit_multinomial(self._design(X), g, len(self.classes_), sample_weight)
        if self.strict:
            self.fit_.raise_if_not_converged("multinomial model")
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "classes_")
        X = check_array(X, dtype=float)
        if self.fit_ is None:
            return np.ones((len(X), 1))
        return multinomial_probabilities(self.fit_, self._design(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def ipw(self, X, y, floor=PROBABILITY_FLOOR) -> PropensityWeights:
        check_is_fitted(self, "classes_")
        lookup = {c: i for i, c in enumerate(self.classes_)}
        g = np.array([lookup[v] for v in np.asarray(y)])
        X = check_array(X, dtype=float)
        return ipw_weights(self.fit_, self._design(X) if self.fit_ is not None else X, g, floor)
