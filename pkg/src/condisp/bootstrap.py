"""Bootstrap bias correction and percentile-free normal intervals.

Minimum disparity fits are bootstrapped by simulating new responses from
the fitted conditional density at the observed covariates; baselines use a
residual bootstrap (continuous) or a parametric bootstrap (discrete).  The
marginal method draws from its fitted model plus the kernel density of its
residuals.  Bandwidths stay fixed across replicates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from .core import Dataset, RngStream, as_generator
from .errors import CondispError, TooManyFailuresError
from .estimators import EstimatorTag, FitResult, fit_estimator
from .models import ModelSpec, sample

log = logging.getLogger(__name__)

Z_95 = 1.96


@dataclass
class BootstrapResult:
    theta: np.ndarray
    corrected: np.ndarray
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    B: int
    replicates: np.ndarray
    failures: int

    def covers(self, truth) -> np.ndarray:
        truth = np.asarray(truth, dtype=float)
        return (self.ci_lo <= truth) & (truth <= self.ci_hi)


def assemble(theta, replicates, B: int | None = None, failures: int = 0, z: float = Z_95) -> BootstrapResult:
    """Bias-corrected estimate ``2 theta - mean(replicates)``, sd of replicates and ``corrected +- z sd``."""
    theta = np.asarray(theta, dtype=float)
    reps = np.asarray(replicates, dtype=float).reshape(-1, theta.size)
    if reps.shape[0] < 2:
        raise TooManyFailuresError("need at least two successful bootstrap replicates")
    corrected = 2.0 * theta - reps.mean(axis=0)
    se = reps.std(axis=0, ddof=1)
    B = reps.shape[0] + failures if B is None else B
    return BootstrapResult(theta, corrected, se, corrected - z * se, corrected + z * se, B, reps, failures)


def _check_failures(failures: int, B: int):
    if failures > B / 2:
        raise TooManyFailuresError(f"{failures} of {B} bootstrap replicates failed")


class ResponseSampler:
    """Draws one response per covariate row from a fitted estimate."""

    def __init__(self, fit: FitResult, dataset: Dataset, model: ModelSpec):
        self.dataset = dataset
        self.model = model
        t = EstimatorTag.parse(fit.tag)
        self.kind = t.density
        x = dataset.covariates
        if t.density in ("mle", "huber"):
            mean = model.mean(x, fit.theta)
            self.mean = mean
            if not model.discrete:
                r = dataset.y_cont[:, 0] - mean
                self.resid = r - r.mean()
        elif t.density == "marginal":
            self.mean = model.mean(x, fit.theta)
            self.resid = dataset.y_cont[:, 0] - self.mean
            self.h = float(fit.bandwidths)
        else:
            dens = fit.density
            self.p = dens.donor_weights(x)
            self.cum = np.cumsum(self.p, axis=1)
            self.cum[:, -1] = 1.0
            self.centre = dens.centering_mean(x)
            self.density = dens
        self.theta = fit.theta

    def draw(self, rng) -> Dataset:
        gen = as_generator(rng)
        ds = self.dataset
        n = ds.n
        if self.kind in ("mle", "huber"):
            if self.model.discrete:
                return ds.with_responses(y_disc=sample(self.model, self.theta, ds.covariates, gen))
            idx = gen.integers(0, n, size=n)
            return ds.with_responses(y_cont=(self.mean + self.resid[idx])[:, None])
        if self.kind == "marginal":
            idx = gen.integers(0, n, size=n)
            e = self.resid[idx] + self.h * gen.standard_normal(n)
            return ds.with_responses(y_cont=(self.mean + e)[:, None])
        u = gen.random(n)
        donors = np.array([np.searchsorted(self.cum[i], u[i], side="right") for i in range(n)])
        d = self.density
        y_disc = None if ds.y_disc is None else d.y_disc[donors].copy()
        y_cont = None
        if ds.d_y:
            z = gen.standard_normal((n, ds.d_y))
            y_cont = d.residuals[donors] + self.centre + z * d.h_y[None, :]
        return ds.with_responses(y_cont=y_cont, y_disc=y_disc)


def _replicate(sampler: ResponseSampler, fit: FitResult, model: ModelSpec, rng: RngStream, fit_kwargs: dict):
    try:
        ds = sampler.draw(rng.spawn("responses"))
        res = fit_estimator(fit.tag, ds, model, bandwidths=fit.bandwidths, rng=rng.spawn("mc"),
                            partition=fit.partition, **fit_kwargs)
        if not res.converged or not np.all(np.isfinite(res.theta)):
            return None
        return res.theta
    except (CondispError, np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
        log.debug("bootstrap replicate failed: %s", exc)
        return None


def bootstrap(fit: FitResult, dataset: Dataset, model: ModelSpec, B: int = 100, rng=None, *,
              n_jobs: int = 1, **fit_kwargs) -> BootstrapResult:
    """Bootstrap any fitted estimator, dispatching on its tag.

    Replicate ``b`` uses the stream ``rng.spawn(b)`` only, so any subset of
    replicates can be reproduced in isolation.  Failed or non-converged
    replicates are dropped and counted.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    stream = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng), ("boot", fit.tag))
    sampler = ResponseSampler(fit, dataset, model)
    if n_jobs == 1:
        out = [_replicate(sampler, fit, model, stream.spawn(b), fit_kwargs) for b in range(B)]
    else:
        out = Parallel(n_jobs=n_jobs)(
            delayed(_replicate)(sampler, fit, model, stream.spawn(b), fit_kwargs) for b in range(B)
        )
    reps = [r for r in out if r is not None]
    failures = B - len(reps)
    _check_failures(failures, B)
    return assemble(fit.theta, np.array(reps), B, failures)


def bootstrap_mde(fit: FitResult, dataset: Dataset, model: ModelSpec, B: int = 100, rng=None, **kw) -> BootstrapResult:
    """Conditional nonparametric bootstrap of a minimum disparity fit."""
    if not EstimatorTag.parse(fit.tag).is_mde:
        raise ValueError(f"{fit.tag} is not a minimum disparity estimator")
    return bootstrap(fit, dataset, model, B, rng, **kw)


def bootstrap_baseline(fit: FitResult, dataset: Dataset, model: ModelSpec, B: int = 100, rng=None, **kw) -> BootstrapResult:
    """Residual (continuous) or parametric (discrete) bootstrap of a likelihood or Huber fit."""
    if EstimatorTag.parse(fit.tag).is_mde:
        raise ValueError(f"{fit.tag} is a minimum disparity estimator")
    return bootstrap(fit, dataset, model, B, rng, **kw)
