"""Minimum disparity estimators and the likelihood / Huber baselines.

Estimator tags follow the usual table labels: ``HD``/``NED`` use an
uncentered conditional density, ``.c`` centers and conditions on every
covariate, ``.h`` centers on every covariate with a pooled residual density,
``.m`` is the marginal residual method.  ``Lik``/``LR``/``MLE`` and
``Hub``/``Huber`` are the baselines.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import logsumexp, ndtr

from .bandwidth import default_grid, select_bandwidths, select_from_grid
from .core import CovariatePartition, Dataset, RngStream, as_generator, validate
from .disparity import DisparityObjective, DisparitySpec, TabulatedDensity, centered_terms, tail_constant
from .errors import (
    NonFiniteObjectiveError,
    OptimizerDivergedError,
    SingularDesignError,
)
from .kernels import BandwidthSet, DensityEstimate, fit_density
from .models import GAUSSIAN, LOG_SIGMA_FLOOR, ModelSpec, log_density, mle_fit

MLE = "MLE"
HUBER = "Huber"
_ALIASES = {"MLE": MLE, "LIK": MLE, "LR": MLE, "LS": MLE, "HUBER": HUBER, "HUB": HUBER}
_DENSITY_SUFFIX = {"": "uncentered", "c": "joint", "h": "homoscedastic", "m": "marginal"}


@dataclass
class OptimizerOptions:
    xtol: float = 1e-6
    max_iter: int = 2000
    step: float = 0.1
    diverge: float = 1e6


@dataclass
class NelderMeadResult:
    x: np.ndarray
    value: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def nelder_mead(objective: Callable, init, opts: OptimizerOptions | None = None) -> NelderMeadResult:
    """Minimise ``objective`` with the standard Nelder-Mead simplex.

    Reflection 1, expansion 2, contraction 0.5, shrink 0.5; the initial
    simplex is ``init`` plus ``step`` along each coordinate.  Converged when
    every vertex lies within ``xtol`` (max-norm) of the best one.
    Non-finite values away from ``init`` are treated as ``+inf``.
    """
    opts = opts or OptimizerOptions()
    x0 = np.asarray(init, dtype=float).reshape(-1)
    k = x0.size
    f0 = float(objective(x0))
    if not np.isfinite(f0):
        raise NonFiniteObjectiveError(f"objective is not finite at the initial point ({f0})")

    def f(x):
        if np.max(np.abs(x)) > opts.diverge:
            raise OptimizerDivergedError(f"iterate left the ball of radius {opts.diverge:g}")
        v = float(objective(x))
        return v if np.isfinite(v) else math.inf

    simplex = np.vstack([x0, x0 + opts.step * np.eye(k)])
    values = np.array([f0] + [f(v) for v in simplex[1:]])
    trace = []
    it = 0
    converged = False
    while True:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        trace.append(values[0])
        if np.max(np.abs(simplex[1:] - simplex[0])) <= opts.xtol:
            converged = True
            break
        if it >= opts.max_iter:
            break
        it += 1
        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1]
        xr = centroid + (centroid - worst)
        fr = f(xr)
        if fr < values[0]:
            xe = centroid + 2.0 * (centroid - worst)
            fe = f(xe)
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-1]:
            xc = centroid + 0.5 * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], values[-1] = xc, fc
                continue
        else:
            xc = centroid + 0.5 * (worst - centroid)
            fc = f(xc)
            if fc < values[-1]:
                simplex[-1], values[-1] = xc, fc
                continue
        simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
        values[1:] = [f(v) for v in simplex[1:]]
    return NelderMeadResult(simplex[0].copy(), float(values[0]), it, converged, trace)


def golden_section(fn: Callable[[float], float], lo: float, hi: float, tol: float = 1e-6, max_iter: int = 200):
    """Minimise a univariate function on ``[lo, hi]``; returns ``(x, f(x))``."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return (c, fc) if fc <= fd else (d, fd)


@dataclass
class EstimatorTag:
    """Parsed estimator label."""

    label: str
    kind: str | None
    density: str

    @classmethod
    def parse(cls, tag: str) -> "EstimatorTag":
        t = tag.strip()
        alias = _ALIASES.get(t.upper())
        if alias is not None:
            return cls(t, None, alias.lower())
        base, _, suffix = t.partition(".")
        base = base.upper()
        if base not in ("HD", "NED") or suffix.lower() not in _DENSITY_SUFFIX:
            raise ValueError(f"unknown estimator tag {tag!r}")
        return cls(t, base, _DENSITY_SUFFIX[suffix.lower()])

    @property
    def is_mde(self) -> bool:
        return self.kind is not None

    def partition(self, p: int) -> CovariatePartition:
        if self.density == "joint":
            return CovariatePartition.joint(p)
        if self.density == "homoscedastic":
            return CovariatePartition.homoscedastic(p)
        return CovariatePartition.uncentered(p)


@dataclass
class FitResult:
    """Outcome of one estimator on one dataset.

    ``bandwidths`` holds what the fit used (a :class:`BandwidthSet`, or the
    residual bandwidth for the marginal method) so that refits on
    bootstrap samples can keep it fixed.
    """

    theta: np.ndarray
    objective: float
    iterations: int
    converged: bool
    tag: str
    seconds: float
    bandwidths: BandwidthSet | float | None = None
    density: DensityEstimate | None = field(default=None, repr=False)
    partition: CovariatePartition | None = None
    trace: list = field(default_factory=list, repr=False)


def _opts(opts) -> OptimizerOptions:
    if opts is None:
        return OptimizerOptions()
    if isinstance(opts, dict):
        return OptimizerOptions(**opts)
    return opts


def _default_init(model: ModelSpec, dataset: Dataset) -> np.ndarray:
    return mle_fit(model, dataset)


def fit_mle(dataset: Dataset, model: ModelSpec, tag: str = "Lik") -> FitResult:
    t0 = time.perf_counter()
    theta = mle_fit(model, dataset)
    y = dataset.y_disc if model.discrete else dataset.y_cont[:, 0]
    nll = -float(np.mean(log_density(model, theta, y, dataset.covariates)))
    return FitResult(theta, nll, 0, True, tag, time.perf_counter() - t0)


def fit_huber(dataset: Dataset, model: ModelSpec | None = None, k: float = 1.345, tag: str = "Huber",
              tol: float = 1e-8, max_iter: int = 500) -> FitResult:
    """Huber M-estimate by iteratively reweighted least squares.

    The scale is the normalised MAD of the current residuals; the returned
    parameter vector ends with the log of that scale.
    """
    t0 = time.perf_counter()
    model = model or ModelSpec.gaussian()
    if model.family != GAUSSIAN:
        raise ValueError("the Huber estimator needs a continuous response")
    X = model.design(dataset.covariates)
    y = dataset.y_cont[:, 0]
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise SingularDesignError("design matrix is rank deficient")
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    it = 0
    converged = False
    scale = 0.0
    for it in range(1, max_iter + 1):
        r = y - X @ beta
        scale = float(np.median(np.abs(r - np.median(r))) / 0.6745)
        if scale <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
            converged = True
            break
        u = np.abs(r) / scale
        w = np.where(u <= k, 1.0, k / np.maximum(u, 1e-300))
        sw = np.sqrt(w)
        new = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
        step = float(np.max(np.abs(new - beta)))
        beta = new
        if step < tol:
            converged = True
            break
    r = y - X @ beta
    scale = float(np.median(np.abs(r - np.median(r))) / 0.6745)
    log_sigma = math.log(scale) if scale > 0 else LOG_SIGMA_FLOOR
    log_sigma = max(log_sigma, LOG_SIGMA_FLOOR)
    theta = np.append(beta, log_sigma)
    return FitResult(theta, float("nan"), it, converged, tag, time.perf_counter() - t0)


def _run_optimizer(objective, starts, opts):
    best = None
    for s in starts:
        try:
            res = nelder_mead(objective, s, opts)
        except NonFiniteObjectiveError:
            continue
        if best is None or res.value < best.value:
            best = res
    if best is None:
        raise NonFiniteObjectiveError("objective not finite at any starting point")
    return best


def _starts(init, model, dataset, multistart, rng):
    starts = [np.asarray(init, dtype=float)]
    if multistart:
        if model.family == GAUSSIAN:
            starts.append(fit_huber(dataset, model).theta)
        gen = as_generator(rng)
        for _ in range(3):
            starts.append(starts[0] + 0.5 * gen.standard_normal(starts[0].size))
    return starts


def fit_mde(
    dataset: Dataset,
    partition: CovariatePartition,
    model: ModelSpec,
    disparity: DisparitySpec,
    bandwidths: BandwidthSet | None = None,
    init=None,
    opts=None,
    *,
    tag: str | None = None,
    grid=None,
    rng=None,
    multistart: bool = False,
) -> FitResult:
    """Minimum disparity estimate with a fixed conditional density estimate.

    Bandwidths are chosen by cross-validation when not supplied.  The
    density is fitted once; the Monte Carlo draws used for continuous
    responses are frozen from ``rng`` (default ``disparity.rng()``), so the
    objective is deterministic in ``theta``.
    """
    t0 = time.perf_counter()
    validate(dataset, partition)
    if bandwidths is None:
        bandwidths = select_bandwidths(dataset, partition, grid)
    density = fit_density(dataset, partition, bandwidths)
    gen = as_generator(disparity.rng() if rng is None else rng)
    objective = DisparityObjective(disparity, density, model, dataset, rng=gen)
    init = _default_init(model, dataset) if init is None else np.asarray(init, dtype=float)
    res = _run_optimizer(objective, _starts(init, model, dataset, multistart, gen), _opts(opts))
    return FitResult(
        res.x, res.value, res.iterations, res.converged, tag or disparity.kind,
        time.perf_counter() - t0, bandwidths, density, partition, res.trace,
    )


class MarginalObjective:
    """Disparity between the kernel density of ``Y - X beta`` and ``N(0, sigma^2)``.

    The integral over the residual axis uses the trapezoid rule on a grid
    covering the residuals; the part of the normal density beyond the grid
    is added in closed form.  Calling the object with ``beta`` and a fixed
    ``log sigma`` gives the outer objective; :meth:`profile` minimises over
    ``log sigma`` by golden-section search.
    """

    def __init__(self, kind: str, dataset: Dataset, model: ModelSpec, bandwidth: float, points: int = 401):
        if model.family != GAUSSIAN or dataset.d_y != 1:
            raise ValueError("the marginal method needs a Gaussian linear model")
        self.kind = kind
        self.X = model.design(dataset.covariates)
        self.y = dataset.y_cont[:, 0]
        self.h = float(bandwidth)
        self.points = points
        self.tail = tail_constant(kind)

    def residual_density(self, beta):
        """Grid, trapezoid weights and kernel density of the residuals at ``beta``."""
        resid = self.y - self.X @ np.asarray(beta, dtype=float)
        span = float(np.max(np.abs(resid))) + 6.0 * self.h
        e = np.linspace(-span, span, self.points)
        u = (e[:, None] - resid[None, :]) / self.h
        f = np.exp(-0.5 * u * u).mean(axis=1) / (self.h * math.sqrt(2 * math.pi))
        w = np.full(e.size, e[1] - e[0])
        w[[0, -1]] *= 0.5
        return e, w, f

    def _disparity(self, e, w, f, log_sigma: float) -> float:
        sigma = math.exp(log_sigma)
        z = e / sigma
        phi = np.exp(-0.5 * z * z - log_sigma) / math.sqrt(2 * math.pi)
        outside = 2.0 * float(ndtr(-e[-1] / sigma))
        return float(w @ centered_terms(self.kind, f, phi)) + self.tail * outside

    def __call__(self, beta, log_sigma: float) -> float:
        return self._disparity(*self.residual_density(beta), log_sigma)

    def profile(self, beta):
        """``(min over log sigma of D, argmin)`` at fixed ``beta``."""
        e, w, f = self.residual_density(beta)
        mass = float(w @ f)
        sd = math.sqrt(max(float(np.sum(w * f * e * e) / mass), 1e-300))
        centre = math.log(sd)
        ls, val = golden_section(lambda t: self._disparity(e, w, f, t), centre - 3.0, centre + 3.0, tol=1e-7)
        return val, ls


def marginal_bandwidth(dataset: Dataset, model: ModelSpec, grid=None) -> float:
    """Cross-validated bandwidth (raw units) for the residual kernel density at the least-squares fit."""
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    theta = mle_fit(model, dataset)
    resid = dataset.y_cont[:, 0] - model.design(dataset.covariates) @ theta[:-1]
    s = float(np.std(resid, ddof=1)) if resid.size > 1 else 1.0
    s = s if s > 0 else 1.0
    scores = np.empty(len(grid))
    n = resid.size
    for g, c in enumerate(grid):
        h = c * s
        u = (resid[:, None] - resid[None, :]) / h
        lk = -0.5 * u * u - math.log(h) - 0.5 * math.log(2 * math.pi)
        np.fill_diagonal(lk, -np.inf)
        vals = np.maximum(logsumexp(lk, axis=1) - math.log(n - 1), math.log(1e-300))
        scores[g] = float(vals.sum())
    return float(grid[select_from_grid(grid, scores, maximize=True)] * s)


def fit_marginal(
    dataset: Dataset,
    model: ModelSpec,
    kind: str,
    bandwidth: float | None = None,
    init=None,
    opts=None,
    *,
    tag: str | None = None,
    grid=None,
    cycles: int = 1,
) -> FitResult:
    """Marginal residual-density estimator.

    The scale is first estimated by minimising the disparity over
    ``log sigma`` at the initial coefficients.  Each cycle then minimises
    over ``beta`` by Nelder-Mead with the scale held fixed (the residual
    density is rebuilt at every evaluation) and re-estimates the scale with
    ``beta`` held fixed.
    """
    t0 = time.perf_counter()
    if bandwidth is None:
        bandwidth = marginal_bandwidth(dataset, model, grid)
    obj = MarginalObjective(kind, dataset, model, bandwidth)
    init = _default_init(model, dataset) if init is None else np.asarray(init, dtype=float)
    beta = init[:-1]
    _, log_sigma = obj.profile(beta)
    iterations = 0
    trace: list = []
    converged = True
    for _ in range(cycles):
        res = nelder_mead(lambda b: obj(b, log_sigma), beta, _opts(opts))
        beta = res.x
        iterations += res.iterations
        trace += res.trace
        converged = converged and res.converged
        val, log_sigma = obj.profile(beta)
    theta = np.append(beta, log_sigma)
    return FitResult(theta, val, iterations, converged, tag or f"{kind}.m",
                     time.perf_counter() - t0, float(bandwidth), None, None, trace)


def fit_estimator(
    tag: str,
    dataset: Dataset,
    model: ModelSpec,
    *,
    bandwidths=None,
    grid=None,
    mc_points: int = 101,
    aggregation: str = "average",
    rng=None,
    init=None,
    opts=None,
    multistart: bool = False,
    partition: CovariatePartition | None = None,
) -> FitResult:
    """Fit any estimator by its table label.

    ``rng`` (an :class:`RngStream`, generator or seed) keys the frozen
    Monte Carlo draws.  ``partition`` overrides the partition implied by
    the tag, which gives access to general centering/conditioning splits.
    """
    t = EstimatorTag.parse(tag)
    if t.density == "mle":
        return fit_mle(dataset, model, tag)
    if t.density == "huber":
        return fit_huber(dataset, model, tag=tag)
    if t.density == "marginal":
        return fit_marginal(dataset, model, t.kind, bandwidths, init, opts, tag=tag, grid=grid)
    part = partition if partition is not None else t.partition(dataset.p)
    gen = as_generator(RngStream(0, tag) if rng is None else rng)
    spec = DisparitySpec(t.kind, mc_points=mc_points, aggregation=aggregation)
    return fit_mde(dataset, part, model, spec, bandwidths, init, opts, tag=tag, grid=grid, rng=gen,
                   multistart=multistart)


def fit_tabulated(tag: str, covariates, table, model: ModelSpec, init=None, opts=None) -> FitResult:
    """Fit to a known conditional pmf at each covariate row instead of data.

    Likelihood tags maximise the expected log-likelihood (a weighted fit
    with the pmf as weights); disparity tags minimise the exact disparity
    between the table and the model.
    """
    t0 = time.perf_counter()
    if not model.discrete:
        raise ValueError("tabulated fits need a discrete family")
    x = np.atleast_2d(np.asarray(covariates, dtype=float))
    table = np.asarray(table, dtype=float)
    support = model.support
    t = EstimatorTag.parse(tag)
    xs = np.repeat(x, support.size, axis=0)
    ys = np.tile(support, x.shape[0])
    ws = table.reshape(-1)
    theta_ml = mle_fit(model, xs, y=ys, weights=ws, init=init)
    if not t.is_mde:
        nll = -float(np.sum(ws * log_density(model, theta_ml, ys, xs)) / x.shape[0])
        return FitResult(theta_ml, nll, 0, True, tag, time.perf_counter() - t0)
    spec = DisparitySpec(t.kind)
    objective = DisparityObjective(spec, TabulatedDensity(table, support), model, None, x_eval=x)
    start = theta_ml if init is None else np.asarray(init, dtype=float)
    res = nelder_mead(objective, start, _opts(opts))
    return FitResult(res.x, res.value, res.iterations, res.converged, tag, time.perf_counter() - t0,
                     trace=res.trace)
