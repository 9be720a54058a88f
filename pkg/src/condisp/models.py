"""Conditional parametric families: Gaussian linear, logistic and binomial regression.

Parameter vectors are flat arrays ``(beta_0, ..., beta_p[, log_sigma])``; the
Gaussian scale is always carried on the log scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from .core import Dataset, as_generator
from .errors import SeparationError, SingularDesignError, SupportError

GAUSSIAN = "gaussian"
LOGISTIC = "logistic"
BINOMIAL = "binomial"

LOG_SIGMA_FLOOR = math.log(1e-8)


@dataclass(frozen=True)
class ModelSpec:
    """A conditional family ``phi(y | x, theta)`` with a linear predictor.

    Parameters
    ----------
    family : {"gaussian", "logistic", "binomial"}
    columns : tuple of int, optional
        Covariate columns (global indices) used as regressors; ``None``
        uses every covariate.  An intercept is always prepended.
    trials : int
        Number of trials for the binomial family (1 for logistic).
    """

    family: str = GAUSSIAN
    columns: tuple[int, ...] | None = None
    trials: int = 1

    def __post_init__(self):
        if self.family not in (GAUSSIAN, LOGISTIC, BINOMIAL):
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == LOGISTIC and self.trials != 1:
            object.__setattr__(self, "trials", 1)
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.columns is not None:
            object.__setattr__(self, "columns", tuple(int(c) for c in self.columns))

    @classmethod
    def gaussian(cls, columns=None) -> "ModelSpec":
        return cls(GAUSSIAN, columns)

    @classmethod
    def logistic(cls, columns=None) -> "ModelSpec":
        return cls(LOGISTIC, columns, 1)

    @classmethod
    def binomial(cls, trials: int = 8, columns=None) -> "ModelSpec":
        return cls(BINOMIAL, columns, trials)

    @property
    def discrete(self) -> bool:
        return self.family != GAUSSIAN

    @property
    def support(self) -> np.ndarray:
        if not self.discrete:
            raise ValueError("continuous family has no finite support")
        return np.arange(self.trials + 1, dtype=float)

    def design(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cols = x if self.columns is None else x[:, list(self.columns)]
        return np.hstack([np.ones((x.shape[0], 1)), cols])

    def n_beta(self, p: int) -> int:
        return 1 + (p if self.columns is None else len(self.columns))

    def n_params(self, p: int) -> int:
        return self.n_beta(p) + (1 if self.family == GAUSSIAN else 0)

    def param_names(self, x_names) -> tuple[str, ...]:
        k = self.n_beta(len(x_names))
        names = [f"beta{j}" for j in range(k)]
        if self.family == GAUSSIAN:
            names.append("log_sigma")
        return tuple(names)

    def split(self, theta):
        theta = np.asarray(theta, dtype=float)
        if self.family == GAUSSIAN:
            return theta[:-1], theta[-1]
        return theta, None

    def mean(self, x, theta) -> np.ndarray:
        """Conditional mean ``E[y | x, theta]``."""
        beta, _ = self.split(theta)
        eta = self.design(x) @ beta
        if self.family == GAUSSIAN:
            return eta
        return self.trials * expit(eta)


def _responses(spec: ModelSpec, y) -> np.ndarray:
    y = np.asarray(y, dtype=float).reshape(-1)
    if spec.discrete:
        bad = (y < 0) | (y > spec.trials) | (y != np.round(y))
        if np.any(bad):
            raise SupportError(f"response {y[bad][0]!r} outside {{0..{spec.trials}}}")
    elif not np.all(np.isfinite(y)):
        raise SupportError("non-finite continuous response")
    return y


def log_density(spec: ModelSpec, theta, y, x) -> np.ndarray | float:
    """Exact ``log phi(y | x, theta)``; vectorised over rows of ``x``."""
    scalar = np.ndim(y) == 0 and np.ndim(x) <= 1
    y = _responses(spec, y)
    beta, log_sigma = spec.split(theta)
    eta = spec.design(x) @ beta
    if spec.family == GAUSSIAN:
        z = (y - eta) * math.exp(-log_sigma)
        out = -0.5 * math.log(2 * math.pi) - log_sigma - 0.5 * z * z
    else:
        m = spec.trials
        out = (
            gammaln(m + 1) - gammaln(y + 1) - gammaln(m - y + 1)
            + y * eta - m * np.logaddexp(0.0, eta)
        )
    return float(out[0]) if scalar else out


def gaussian_log_density_grid(eta: np.ndarray, log_sigma: float, y: np.ndarray) -> np.ndarray:
    """Gaussian log density of ``y[i, k]`` around ``eta[i]``; the hot path of the objectives."""
    z = (y - eta[:, None]) * math.exp(-log_sigma)
    return (-0.5 * math.log(2 * math.pi) - log_sigma) - 0.5 * z * z


def sample(spec: ModelSpec, theta, x, rng) -> np.ndarray:
    """One draw from ``phi(. | x_i, theta)`` for each covariate row."""
    gen = as_generator(rng)
    beta, log_sigma = spec.split(theta)
    eta = spec.design(x) @ beta
    if spec.family == GAUSSIAN:
        return eta + math.exp(log_sigma) * gen.standard_normal(eta.shape[0])
    return gen.binomial(spec.trials, expit(eta)).astype(float)


def score(spec: ModelSpec, theta, y, x) -> np.ndarray:
    """Gradient of :func:`log_density` in ``theta``, one row per observation."""
    scalar = np.ndim(y) == 0 and np.ndim(x) <= 1
    y = _responses(spec, y)
    beta, log_sigma = spec.split(theta)
    X = spec.design(x)
    eta = X @ beta
    if spec.family == GAUSSIAN:
        s2 = math.exp(2 * log_sigma)
        r = y - eta
        out = np.hstack([X * (r / s2)[:, None], (r * r / s2 - 1.0)[:, None]])
    else:
        out = X * (y - spec.trials * expit(eta))[:, None]
    return out[0] if scalar else out


def fisher_information(spec: ModelSpec, theta, x) -> np.ndarray:
    """Per-observation Fisher information averaged over the covariate rows."""
    beta, log_sigma = spec.split(theta)
    X = spec.design(x)
    n = X.shape[0]
    if spec.family == GAUSSIAN:
        k = X.shape[1]
        info = np.zeros((k + 1, k + 1))
        info[:k, :k] = X.T @ X / (n * math.exp(2 * log_sigma))
        info[k, k] = 2.0
        return info
    p = expit(X @ beta)
    w = spec.trials * p * (1 - p)
    return (X * w[:, None]).T @ X / n


def _xy(spec: ModelSpec, data, y=None):
    if isinstance(data, Dataset):
        x = data.covariates
        if spec.discrete:
            if data.y_disc is None:
                raise SupportError("discrete family needs a discrete response")
            y = data.y_disc
        else:
            y = data.y_cont[:, 0]
        return x, y
    return np.atleast_2d(np.asarray(data, dtype=float)), y


def mle_fit(spec: ModelSpec, data, init=None, *, y=None, weights=None, max_iter: int = 200) -> np.ndarray:
    """Maximum likelihood estimate.

    ``data`` is a :class:`~condisp.core.Dataset` or a covariate matrix with
    ``y`` given separately.  Optional non-negative ``weights`` give a
    weighted likelihood (used for fitting to expected frequencies).
    """
    x, y = _xy(spec, data, y)
    y = _responses(spec, y)
    X = spec.design(x)
    n, k = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if np.linalg.matrix_rank(X[w > 0]) < k:
        raise SingularDesignError("design matrix is rank deficient")
    if spec.family == GAUSSIAN:
        sw = np.sqrt(w)
        beta = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        r = y - X @ beta
        var = float(np.sum(w * r * r) / np.sum(w))
        log_sigma = max(0.5 * math.log(var), LOG_SIGMA_FLOOR) if var > 0 else LOG_SIGMA_FLOOR
        return np.append(beta, log_sigma)
    return _newton_glm(spec, X, y, w, init, max_iter)


def _newton_glm(spec, X, y, w, init, max_iter):
    m = spec.trials
    k = X.shape[1]
    beta = np.zeros(k) if init is None else np.asarray(init, dtype=float)[:k].copy()

    def loglik(b):
        eta = X @ b
        return float(np.sum(w * (y * eta - m * np.logaddexp(0.0, eta))))

    ll = loglik(beta)
    for _ in range(max_iter):
        p = expit(X @ beta)
        grad = X.T @ (w * (y - m * p))
        if np.linalg.norm(grad) < 1e-8:
            break
        H = (X * (w * m * p * (1 - p))[:, None]).T @ X
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12 or t < 1e-10:
                break
            t *= 0.5
        beta, ll = cand, ll_new
        if np.linalg.norm(beta) > 1e3:
            raise SeparationError("coefficients diverge; data appear separated")
    p = expit(X @ beta)
    fitted_perfect = np.all(np.abs(y - m * p)[w > 0] < 1e-6 * m)
    if np.linalg.norm(beta) > 1e3 or (fitted_perfect and np.linalg.norm(beta) > 10):
        raise SeparationError("coefficients diverge; data appear separated")
    return beta
