"""L2-regularized logistic regression solved by damped Newton iterations."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class LogisticConfig:
    C: float = 1.0
    max_iter: int = 1000
    tol: float = 1e-6              # on the gradient's infinity norm
    fit_intercept: bool = True


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float
    n_iter: int
    converged: bool
    grad_norm: float

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.decision_function(X)))


def _objective(w, X, y, sw, lam, fit_intercept):
    z = X @ w
    loss = np.sum(sw * (np.logaddexp(0.0, z) - y * z))
    reg = w[:-1] if fit_intercept else w
    return loss + 0.5 * lam * reg @ reg


def fit_logistic(X, y, config: LogisticConfig | None = None, sample_weight=None) -> LinearModel:
    """Minimizes sum_i s_i * logloss_i + ||coef||^2 / (2C); the intercept is not penalized.

    Non-convergence within ``max_iter`` emits a ConvergenceWarning and sets
    ``converged=False``.
    """
    cfg = config or LogisticConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.isnan(X).any():
        raise ValueError("logistic regression needs imputed input")
    n, d = X.shape
    sw = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    A = np.hstack([X, np.ones((n, 1))]) if cfg.fit_intercept else X
    lam = 1.0 / cfg.C
    penalty = np.ones(A.shape[1])
    if cfg.fit_intercept:
        penalty[-1] = 0.0
    w = np.zeros(A.shape[1])
    f = _objective(w, A, y, sw, lam, cfg.fit_intercept)
    gnorm = np.inf
    for it in range(1, cfg.max_iter + 1):
        z = A @ w
        p = 0.5 * (1.0 + np.tanh(0.5 * z))
        grad = A.T @ (sw * (p - y)) + lam * penalty * w
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < cfg.tol:
            return LinearModel(w[:d].copy(), float(w[d]) if cfg.fit_intercept else 0.0, it - 1, True, gnorm)
        H = (A * (sw * p * (1 - p))[:, None]).T @ A + np.diag(lam * penalty)
        H[np.diag_indices_from(H)] += 1e-12
        step = np.linalg.solve(H, grad)
        t = 1.0
        while True:
            w_new = w - t * step
            f_new = _objective(w_new, A, y, sw, lam, cfg.fit_intercept)
            if f_new <= f - 1e-4 * t * (grad @ step) or t < 1e-10:
                break
            t *= 0.5
        w, f = w_new, f_new
    warnings.warn(f"logistic regression did not converge in {cfg.max_iter} iterations "
                  f"(gradient norm {gnorm:.3g})", ConvergenceWarning)
    return LinearModel(w[:d].copy(), float(w[d]) if cfg.fit_intercept else 0.0, cfg.max_iter, False, gnorm)
