"""Damped Newton-Raphson maximiser shared by the likelihood models."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRAD_TOL = 1e-8
STEP_TOL = 1e-10
STEP_TOL_WITH_GRAD = 1e-6
MAX_ITER = 50
MAX_HALVINGS = 30


class RankDeficientError(ValueError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {self.columns}")


class NonConvergenceError(RuntimeError):
    pass


@dataclass
class ModelFit:
    coef: np.ndarray
    cov: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    names: list = field(default_factory=list)
    grad_max: float = float("nan")
    message: str = ""

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    def raise_if_not_converged(self, label: str = "model"):
        if not self.converged:
            raise NonConvergenceError(f"{label} did not converge: {self.message}")

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "coef": [float(c) for c in self.coef],
            "se": [float(s) for s in self.se],
            "loglik": float(self.loglik),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "grad_max": float(self.grad_max),
            "message": self.message,
        }


def collinear_columns(X: np.ndarray, names) -> list:
    """Columns that add nothing to the span of the columns before them."""
    X = np.asarray(X, float)
    if X.shape[1] == 0:
        return []
    scale = np.linalg.norm(X, axis=0)
    scale[scale == 0] = 1.0
    Xs = X / scale
    bad = []
    keep = []
    rank = 0
    for j in range(X.shape[1]):
        trial = keep + [j]
        r = np.linalg.matrix_rank(Xs[:, trial], tol=1e-10 * max(X.shape))
        if r > rank:
            keep.append(j)
            rank = r
        else:
            bad.append(names[j])
    return bad


def check_full_rank(X: np.ndarray, names) -> None:
    bad = collinear_columns(X, names)
    if bad:
        raise RankDeficientError(bad)


def newton_maximize(fun, beta0: np.ndarray, max_iter: int = MAX_ITER):
    """Maximise ``fun(beta) -> (loglik, grad, hess)`` with step halving.

    Converged when the largest gradient component is below GRAD_TOL and
    the last step is below STEP_TOL_WITH_GRAD, or when a full step is
    below STEP_TOL. Returns ``(beta, loglik, grad, hess, iterations,
    converged, message)``.
    """
    beta = np.asarray(beta0, float).copy()
    ll, g, H = fun(beta)
    if not np.isfinite(ll):
        return beta, ll, g, H, 0, False, "non-finite log-likelihood at start"
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-H, g, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            return beta, ll, g, H, it, False, "non-finite Newton step"
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = beta + t * step
            ll_new, g_new, H_new = fun(cand)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        else:
            return beta, ll, g, H, it, False, "step halving failed to improve the log-likelihood"
        size = float(np.max(np.abs(t * step))) if step.size else 0.0
        beta, ll, g, H = cand, ll_new, g_new, H_new
        gmax = float(np.max(np.abs(g))) if g.size else 0.0
        if (gmax < GRAD_TOL and size < STEP_TOL_WITH_GRAD) or size < STEP_TOL:
            return beta, ll, g, H, it, True, "converged"
    return beta, ll, g, H, max_iter, False, (
        f"no convergence in {max_iter} iterations (max |gradient| {float(np.max(np.abs(g))):.3g}); "
        "possible separation or monotone likelihood")


def covariance_from_hessian(H: np.ndarray) -> np.ndarray:
    info = -np.asarray(H, float)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    return (cov + cov.T) / 2
