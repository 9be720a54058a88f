"""Disparities between a nonparametric conditional density and a parametric model.

For each covariate point the disparity is ``sum_y C(f/phi - 1) phi`` on a
discrete support, or an importance-sampled integral with draws from ``f``
for continuous responses.  Draws are generated once when a
:class:`DisparityObjective` is built, so the objective is a deterministic,
smooth function of ``theta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .core import Dataset, RngStream, as_generator
from .errors import DegenerateDensityError, ValidationError
from .kernels import DENSITY_FLOOR, DensityEstimate
from .models import GAUSSIAN, ModelSpec, gaussian_log_density_grid, log_density

HD = "HD"
NED = "NED"
KINDS = (HD, NED)

AVERAGE = "average"
INTEGRATE = "integrate"

_DELTA_MIN = -1.0 + 1e-12


def _check_kind(kind: str) -> str:
    k = kind.upper()
    if k not in KINDS:
        raise ValueError(f"unknown disparity {kind!r}; expected one of {KINDS}")
    return k


def c_function(kind: str, delta):
    """Convex disparity generator ``C(delta)``, minimised at ``delta = 0``."""
    kind = _check_kind(kind)
    d = np.asarray(delta, dtype=float)
    if np.any(d < -1):
        raise ValueError("C is defined for delta >= -1")
    if kind == NED:
        out = np.exp(-d) - 1.0
    else:
        out = (np.sqrt(d + 1.0) - 1.0) ** 2 - 1.0
    return float(out) if np.ndim(delta) == 0 else out


def c_derivatives(kind: str, delta):
    """``(C, C', C'')`` at ``delta > -1``."""
    kind = _check_kind(kind)
    d = np.asarray(delta, dtype=float)
    if kind == NED:
        e = np.exp(-d)
        return e - 1.0, -e, e
    s = np.sqrt(d + 1.0)
    return (s - 1.0) ** 2 - 1.0, 1.0 - 1.0 / s, 0.5 * (d + 1.0) ** -1.5


def residual_adjustment(kind: str, r):
    """Residual adjustment functions ``(A1, A2, A3)`` at density ratio ``r > 0``.

    ``A1 = -C''(r-1) r``, ``A2 = C(r-1) - C'(r-1) r``, ``A3 = C''(r-1) r^2``.
    Diagnostic only.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise ValueError("r must be positive")
    c, c1, c2 = c_derivatives(kind, r - 1.0)
    a1, a2, a3 = -c2 * r, c - c1 * r, c2 * r * r
    if np.ndim(r) == 0:
        return float(a1), float(a2), float(a3)
    return a1, a2, a3


def discrete_terms(kind: str, f, phi) -> np.ndarray:
    """``C(f/phi - 1) phi`` elementwise, written to stay finite when ``phi -> 0``."""
    kind = _check_kind(kind)
    f = np.asarray(f, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if kind == HD:
        return (np.sqrt(f) - np.sqrt(phi)) ** 2 - phi
    ratio = np.maximum(f / np.maximum(phi, DENSITY_FLOOR), 1.0 + _DELTA_MIN)
    with np.errstate(over="ignore"):
        return phi * (np.exp(1.0 - ratio) - 1.0)


def centered_terms(kind: str, f, phi) -> np.ndarray:
    """``[C(delta) - C'(0) delta] phi``: same integral as :func:`discrete_terms`, never below ``C(0) phi``."""
    kind = _check_kind(kind)
    out = discrete_terms(kind, f, phi)
    if kind == NED:
        out = out + (np.asarray(f, dtype=float) - np.asarray(phi, dtype=float))
    return out


def tail_constant(kind: str) -> float:
    """Centered integrand per unit of ``phi`` where ``f = 0``, i.e. ``C(-1) + C'(0)``."""
    _, c1, _ = c_derivatives(kind, 0.0)
    return float(c_function(kind, -1.0) + c1)


def importance_terms(kind: str, log_ratio) -> np.ndarray:
    """Importance-sampling integrand for draws from ``f``, with ``r = f/phi`` given as ``log r``.

    The integrand is ``[C(r-1) - C'(0)(r-1)] / r``.  The linear term
    integrates to ``int f - int phi = 0``, so the expectation is the
    disparity.  For NED every term is then non-negative, so a parametric
    density drifting away from the draws cannot push the estimate below its
    minimum.  For HD ``C'(0) = 0`` and the literal form is kept.
    """
    kind = _check_kind(kind)
    lr = np.maximum(np.asarray(log_ratio, dtype=float), math.log(1.0 + _DELTA_MIN))
    with np.errstate(over="ignore"):
        if kind == HD:
            return 1.0 - 2.0 * np.exp(-0.5 * lr)
        r = np.exp(lr)
        # 1 + (e^{1-r} - 2) / r stays finite when r overflows
        return 1.0 + (np.exp(1.0 - r) - 2.0) / r


@dataclass(frozen=True)
class DisparitySpec:
    """Which disparity to use and how to integrate it.

    ``aggregation`` is ``"average"`` (mean over observed covariates) or
    ``"integrate"`` (conditioning covariates taken from a resampled
    observation, pairing ``X_i`` with ``X_J`` for random ``J``).  ``seed``/``stream`` key the frozen Monte Carlo draws.
    """

    kind: str = NED
    mc_points: int = 101
    aggregation: str = AVERAGE
    seed: int = 0
    stream: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", _check_kind(self.kind))
        if self.mc_points < 1:
            raise ValidationError("mc_points must be >= 1")
        if self.aggregation not in (AVERAGE, INTEGRATE):
            raise ValidationError(f"unknown aggregation {self.aggregation!r}")

    def rng(self) -> RngStream:
        return RngStream(self.seed, self.stream)


class TabulatedDensity:
    """Known conditional pmf on a discrete support, one row per evaluation point."""

    def __init__(self, table, support=None):
        self.table = np.atleast_2d(np.asarray(table, dtype=float))
        self.support = None if support is None else np.asarray(support, dtype=float)


def evaluation_points(spec: DisparitySpec, density, dataset: Dataset, rng) -> np.ndarray:
    """Covariate rows at which pointwise disparities are averaged.

    For ``"integrate"`` row ``i`` keeps its centering-only covariates and
    takes the conditioning covariates of a uniformly drawn observation.
    """
    x = dataset.covariates
    if spec.aggregation == AVERAGE or not isinstance(density, DensityEstimate) or density.g_block.empty:
        return x
    gen = as_generator(rng)
    g = density.g_block
    n = dataset.n
    donors = gen.integers(0, n, size=n)
    out = x.copy()
    cols = list(g.indices)
    out[:, cols] = x[donors][:, cols]
    return out


class DisparityObjective:
    """``theta -> D_n(f, theta)`` with every density evaluation precomputed.

    Parameters
    ----------
    spec : DisparitySpec
    density : DensityEstimate or TabulatedDensity
    model : ModelSpec
    dataset : Dataset
        Supplies the covariates the disparity is aggregated over.
    rng : RngStream or Generator, optional
        Source of the frozen draws; defaults to ``spec.rng()``.
    """

    def __init__(self, spec: DisparitySpec, density, model: ModelSpec, dataset: Dataset, rng=None, x_eval=None):
        self.spec = spec
        self.model = model
        gen = as_generator(spec.rng() if rng is None else rng)
        if x_eval is None:
            x_eval = evaluation_points(spec, density, dataset, gen)
        self.x_eval = np.atleast_2d(np.asarray(x_eval, dtype=float))
        self.design = model.design(self.x_eval)
        m = self.x_eval.shape[0]
        if model.discrete:
            self.support = model.support
            if isinstance(density, TabulatedDensity):
                table = density.table
                if table.shape != (m, self.support.size):
                    raise ValueError("tabulated pmf does not match evaluation points and support")
            else:
                ys = np.tile(self.support, (m, 1))
                table = density.pdf(None, self.x_eval, y_disc=ys)
            self.f = table
            self.draws = None
            t = model.trials
            self._log_binom = (gammaln(t + 1) - gammaln(self.support + 1) - gammaln(t - self.support + 1))[None, :]
        else:
            if model.family != GAUSSIAN or density.dataset.d_y != 1:
                raise ValueError("continuous disparities need one continuous response")
            M = spec.mc_points
            p = density.donor_weights(self.x_eval)
            mean = density.centering_mean(self.x_eval)
            cum = np.cumsum(p, axis=1)
            cum[:, -1] = 1.0
            u = gen.random((m, M))
            donors = np.empty((m, M), dtype=np.intp)
            for a in range(m):
                donors[a] = np.searchsorted(cum[a], u[a], side="right")
            z = gen.standard_normal((m, M))
            draws = density.residuals[donors, 0] + mean[:, :1] + density.h_y[0] * z
            f = density._pdf_given(p, mean, draws[:, :, None], None)
            if np.any(f < DENSITY_FLOOR):
                raise DegenerateDensityError("density estimate vanished at its own draw")
            self.draws = draws
            self.log_f = np.log(f)

    def pointwise(self, theta) -> np.ndarray:
        beta, log_sigma = self.model.split(theta)
        eta = self.design @ beta
        if self.model.discrete:
            m = self.model.trials
            ys = self.support[None, :]
            logphi = self._log_binom + ys * eta[:, None] - m * np.logaddexp(0.0, eta)[:, None]
            return discrete_terms(self.spec.kind, self.f, np.exp(logphi)).sum(axis=1)
        logphi = gaussian_log_density_grid(eta, log_sigma, self.draws)
        return importance_terms(self.spec.kind, self.log_f - logphi).mean(axis=1)

    def __call__(self, theta) -> float:
        return float(np.mean(self.pointwise(theta)))


def pointwise_disparity(spec: DisparitySpec, density, model: ModelSpec, theta, x, rng=None) -> float:
    """Disparity between ``f(. | x)`` and ``phi(. | x, theta)`` at one covariate point."""
    obj = DisparityObjective(spec, density, model, None, rng=rng, x_eval=np.atleast_2d(x))
    return float(obj.pointwise(theta)[0])


def total_disparity(spec: DisparitySpec, density, model: ModelSpec, theta, dataset: Dataset, rng=None) -> float:
    """Aggregate disparity over the dataset's covariates (fresh frozen draws from ``rng``)."""
    return DisparityObjective(spec, density, model, dataset, rng=rng)(theta)


def exact_discrete_disparity(kind: str, f, model: ModelSpec, theta, x) -> np.ndarray:
    """Pointwise disparity for a known pmf table ``f`` (rows aligned with ``x``)."""
    support = model.support
    x = np.atleast_2d(x)
    phi = np.exp(np.stack([log_density(model, theta, np.full(x.shape[0], y), x) for y in support], axis=1))
    return discrete_terms(kind, f, phi).sum(axis=1)
