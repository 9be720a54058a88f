"""Gaussian product kernels and the centered conditional density estimators.

All four estimator variants reduce to one mixture form.  With donor
weights ``p_j(x)`` proportional to the conditioning-block kernel (uniform
when the conditioning set is empty) and residuals ``E_j = Y_j - m(X_j)``
from a Nadaraya-Watson fit on the centering block (``m = 0`` when that set
is empty)::

    f(y1, y2 | x) = sum_j p_j(x) K_hy(y1 - m(x) - E_j) I(y2 == Y_j2)

which is exactly ``g(x, y1 - m(x), y2) / h(x)`` because the conditioning
kernel and its normalising constant cancel in the ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import (
    CovariatePartition,
    Dataset,
    Variant,
    as_generator,
    fuse_labels,
    validate,
    variant_of,
)
from .errors import EmptyCellError, EmptyDataError, ZeroDensityError

LOG_2PI = math.log(2.0 * math.pi)
DENSITY_FLOOR = 1e-300


def gaussian_kernel(u) -> float:
    """Standard multivariate normal density at ``u``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    d = u.size
    return float((2.0 * math.pi) ** (-d / 2.0) * math.exp(-0.5 * float(u @ u)))


def log_kernel_matrix(query: np.ndarray, data: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``log K_h(query_a - data_i)`` for every pair, shape ``(m, n)``.

    ``K_h(u) = prod_j phi(u_j / h_j) / h_j``; zero-dimensional blocks give 0.
    """
    query = np.asarray(query, dtype=float)
    data = np.asarray(data, dtype=float)
    d = data.shape[1]
    if d == 0:
        return np.zeros((query.shape[0], data.shape[0]))
    h = np.broadcast_to(np.asarray(h, dtype=float), (d,))
    sq = np.zeros((query.shape[0], data.shape[0]))
    for j in range(d):
        diff = (query[:, j, None] - data[None, :, j]) / h[j]
        sq += diff * diff
    return -0.5 * sq - np.log(h).sum() - 0.5 * d * LOG_2PI


def kde(data, bandwidth, query, labels=None, query_label=None) -> float:
    """Mixed-type kernel density estimate at a single query point.

    ``(1 / n) sum_i K_c(query - X_i) I(labels_i == query_label)`` where the
    sum runs over all ``n`` rows, so the estimate integrates (over the
    continuous part) to the empirical frequency of ``query_label``.
    """
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[0] == 0:
        raise EmptyDataError("kde needs at least one observation")
    q = np.atleast_1d(np.asarray(query, dtype=float)).reshape(1, -1)
    lk = log_kernel_matrix(q, data, bandwidth)[0]
    w = np.exp(lk)
    if labels is not None:
        labels = np.asarray(labels)
        if labels.ndim == 1:
            labels = labels[:, None]
        ql = np.atleast_1d(np.asarray(query_label, dtype=float))
        w = w * np.all(labels == ql[None, :], axis=1)
    return float(w.sum() / data.shape[0])


@dataclass(frozen=True)
class BandwidthSet:
    """Bandwidth multipliers for the centering, conditioning and response blocks.

    ``c_m`` and ``c_g`` may be a single float or a mapping from a discrete
    level tuple (of the block's discrete columns) to a float.  Effective
    bandwidths are ``c * scale`` column-wise; ``x_scale`` (one entry per
    continuous covariate) and ``y_scale`` (one per continuous response)
    default to ones, i.e. raw units.
    """

    c_m: float | dict = 1.0
    c_g: float | dict = 1.0
    c_y: float = 1.0
    x_scale: np.ndarray | None = None
    y_scale: np.ndarray | None = None

    def __post_init__(self):
        for name in ("c_m", "c_g"):
            c = getattr(self, name)
            vals = list(c.values()) if isinstance(c, dict) else [c]
            if not all(np.isfinite(v) and v > 0 for v in vals):
                raise ValueError(f"{name} must be positive and finite, got {c!r}")
        if not (np.isfinite(self.c_y) and self.c_y > 0):
            raise ValueError(f"c_y must be positive and finite, got {self.c_y!r}")
        for name in ("x_scale", "y_scale"):
            s = getattr(self, name)
            if s is not None:
                s = np.atleast_1d(np.asarray(s, dtype=float))
                if not np.all(np.isfinite(s) & (s > 0)):
                    raise ValueError(f"{name} must be positive and finite")
                object.__setattr__(self, name, s)

    def x_scale_for(self, d_x: int) -> np.ndarray:
        return np.ones(d_x) if self.x_scale is None else self.x_scale

    def y_scale_for(self, d_y: int) -> np.ndarray:
        return np.ones(d_y) if self.y_scale is None else self.y_scale

    def collapsed(self) -> "BandwidthSet":
        """Replace per-level bandwidths by their arithmetic mean."""

        def avg(c):
            return float(np.mean(list(c.values()))) if isinstance(c, dict) else c

        return BandwidthSet(avg(self.c_m), avg(self.c_g), self.c_y, self.x_scale, self.y_scale)


def column_scales(a: np.ndarray) -> np.ndarray:
    """Sample standard deviations, falling back to 1 for constant or single rows."""
    a = np.asarray(a, dtype=float)
    if a.shape[0] < 2:
        return np.ones(a.shape[1])
    s = a.std(axis=0, ddof=1)
    return np.where(np.isfinite(s) & (s > 0), s, 1.0)


class KernelBlock:
    """Kernel weights over a subset of covariates (continuous smoothed, discrete matched)."""

    def __init__(self, dataset: Dataset, indices, c, x_scale: np.ndarray):
        indices = tuple(indices)
        self.indices = indices
        self.cont = [i for i in indices if i < dataset.d_x]
        self.disc = [i for i in indices if i >= dataset.d_x]
        cov = dataset.covariates
        self.data = cov[:, self.cont]
        self.codes, self.levels = fuse_labels(cov[:, self.disc])
        self.c = c
        self.scale = x_scale[self.cont] if self.cont else np.zeros(0)
        self.n = dataset.n

    @property
    def empty(self) -> bool:
        return not self.indices

    def level_codes(self, query: np.ndarray) -> np.ndarray:
        if not self.disc:
            return np.zeros(query.shape[0], dtype=np.intp)
        codes, _ = fuse_labels(query[:, self.disc], reference=self.levels)
        return codes

    def bandwidth(self, code: int) -> np.ndarray:
        c = self.c
        if isinstance(c, dict):
            key = tuple(float(v) for v in self.levels[code]) if self.disc else ()
            c = c.get(key, float(np.mean(list(c.values()))))
        return c * self.scale

    def log_weights(self, query: np.ndarray) -> np.ndarray:
        """``log[K_h(x - X_i) I(level_i == level(x))]``, shape ``(m, n)``."""
        query = np.atleast_2d(np.asarray(query, dtype=float))
        codes = self.level_codes(query)
        out = np.full((query.shape[0], self.n), -np.inf)
        for code in np.unique(codes):
            rows = np.flatnonzero(codes == code)
            if code < 0:
                continue
            match = np.flatnonzero(self.codes == code)
            lk = log_kernel_matrix(query[np.ix_(rows, self.cont)], self.data[match], self.bandwidth(code))
            out[np.ix_(rows, match)] = lk
        return out


def _check_query(query: np.ndarray, p: int) -> np.ndarray:
    q = np.atleast_2d(np.asarray(query, dtype=float))
    if q.shape[1] != p:
        raise ValueError(f"covariate query must have {p} columns, got {q.shape[1]}")
    return q


def _nw_from_block(block: KernelBlock, y: np.ndarray, query: np.ndarray) -> np.ndarray:
    lw = block.log_weights(query)
    codes = block.level_codes(query)
    if np.any(codes < 0):
        bad = int(np.flatnonzero(codes < 0)[0])
        raise EmptyCellError(f"no observation shares the discrete centering level of query {query[bad]!r}")
    top = lw.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        bad = int(np.flatnonzero(~np.isfinite(top[:, 0]))[0])
        raise ZeroDensityError("Nadaraya-Watson denominator vanished", query[bad])
    # the ratio is invariant to a common factor, so far queries do not underflow
    w = np.exp(lw - top)
    return (w @ y) / w.sum(axis=1)[:, None]


def nadaraya_watson(dataset: Dataset, partition: CovariatePartition, bandwidths: BandwidthSet, query) -> np.ndarray:
    """Kernel-weighted mean of the continuous responses at a covariate point.

    ``query`` is a full covariate vector (length ``dataset.p``); only its
    centering components are used.  Returns a vector of length ``d_y``.
    """
    q = _check_query(query, dataset.p)
    block = KernelBlock(dataset, partition.centering, bandwidths.c_m, bandwidths.x_scale_for(dataset.d_x))
    out = _nw_from_block(block, dataset.y_cont, q)
    return out[0] if np.ndim(query) == 1 else out


@dataclass(eq=False)
class DensityEstimate:
    """Fitted conditional density ``f(y1, y2 | x)``; immutable after :func:`fit_density`."""

    dataset: Dataset
    partition: CovariatePartition
    bandwidths: BandwidthSet
    variant: Variant
    residuals: np.ndarray
    fitted: np.ndarray
    h_y: np.ndarray
    m_block: KernelBlock = field(repr=False)
    g_block: KernelBlock = field(repr=False)

    @property
    def y_disc(self) -> np.ndarray | None:
        return self.dataset.y_disc

    def centering_mean(self, query) -> np.ndarray:
        q = _check_query(query, self.dataset.p)
        if self.m_block.empty:
            return np.zeros((q.shape[0], self.dataset.d_y))
        return _nw_from_block(self.m_block, self.dataset.y_cont, q)

    def conditioning_density(self, query) -> np.ndarray:
        """Kernel estimate of the conditioning covariates' density (1 if none)."""
        q = _check_query(query, self.dataset.p)
        if self.g_block.empty:
            return np.ones(q.shape[0])
        return np.exp(self.g_block.log_weights(q)).mean(axis=1)

    def donor_weights(self, query) -> np.ndarray:
        """Normalised mixture weights ``p_j(x)``, shape ``(m, n)``."""
        q = _check_query(query, self.dataset.p)
        n = self.dataset.n
        if self.g_block.empty:
            return np.full((q.shape[0], n), 1.0 / n)
        lw = self.g_block.log_weights(q)
        top = lw.max(axis=1, keepdims=True)
        if not np.all(np.isfinite(top)):
            bad = int(np.flatnonzero(~np.isfinite(top[:, 0]))[0])
            raise ZeroDensityError("conditioning density vanished", q[bad])
        w = np.exp(lw - top)
        return w / w.sum(axis=1, keepdims=True)

    def pdf(self, y_cont, query, y_disc=None) -> np.ndarray:
        """Evaluate ``f(y | x_a)`` for ``k`` responses per query row.

        ``y_cont`` has shape ``(m, k, d_y)``; ``y_disc`` shape ``(m, k)``.
        Returns shape ``(m, k)``.
        """
        q = _check_query(query, self.dataset.p)
        p = self.donor_weights(q)
        mean = self.centering_mean(q)
        return self._pdf_given(p, mean, y_cont, y_disc)

    def _pdf_given(self, p, mean, y_cont, y_disc) -> np.ndarray:
        m = p.shape[0]
        d_y = self.dataset.d_y
        if d_y == 0:
            y_disc = np.broadcast_to(np.asarray(y_disc, dtype=float), (m, np.shape(y_disc)[-1]))
            y_cont = np.zeros((m, y_disc.shape[1], 0))
        else:
            y_cont = np.asarray(y_cont, dtype=float)
            if y_cont.ndim != 3:
                y_cont = y_cont.reshape(m, -1, d_y)
            y_cont = np.broadcast_to(y_cont, (m, y_cont.shape[1], d_y))
        k = y_cont.shape[1]
        out = np.empty((m, k))
        E = self.residuals
        h = self.h_y
        const = -np.log(h).sum() - 0.5 * d_y * LOG_2PI if d_y else 0.0
        for a in range(m):
            sq = np.zeros((k, E.shape[0]))
            for j in range(d_y):
                u = (y_cont[a, :, j, None] - mean[a, j] - E[None, :, j]) / h[j]
                sq += u * u
            ky = np.exp(-0.5 * sq + const)
            if self.y_disc is not None:
                ky = ky * (np.asarray(y_disc)[a][:, None] == self.y_disc[None, :])
            out[a] = ky @ p[a]
        return out

    def sample(self, query, count: int, rng):
        """Draw ``count`` responses from ``f(. | x)`` at a single covariate point.

        Returns ``(y_cont, y_disc)`` with shapes ``(count, d_y)`` and
        ``(count,)`` (``None`` without a discrete response).
        """
        gen = as_generator(rng)
        q = _check_query(query, self.dataset.p)[:1]
        p = self.donor_weights(q)[0]
        mean = self.centering_mean(q)[0]
        donors = gen.choice(self.dataset.n, size=count, p=p)
        z = gen.standard_normal((count, self.dataset.d_y))
        y = self.residuals[donors] + mean[None, :] + z * self.h_y[None, :]
        y2 = None if self.y_disc is None else self.y_disc[donors].copy()
        return y, y2


def fit_density(dataset: Dataset, partition: CovariatePartition, bandwidths: BandwidthSet) -> DensityEstimate:
    """Fit the conditional density estimator selected by the partition."""
    validate(dataset, partition)
    variant = variant_of(partition, range(dataset.p))
    x_scale = bandwidths.x_scale_for(dataset.d_x)
    m_block = KernelBlock(dataset, partition.centering, bandwidths.c_m, x_scale)
    g_block = KernelBlock(dataset, partition.conditioning, bandwidths.c_g, x_scale)
    if m_block.empty or dataset.d_y == 0:
        fitted = np.zeros_like(dataset.y_cont)
    else:
        counts = np.bincount(m_block.codes)
        if np.any(counts[counts > 0] < 2):
            raise EmptyCellError("a discrete centering level has fewer than 2 observations")
        fitted = _nw_from_block(m_block, dataset.y_cont, dataset.covariates)
    residuals = dataset.y_cont - fitted
    h_y = bandwidths.c_y * bandwidths.y_scale_for(dataset.d_y)
    return DensityEstimate(
        dataset=dataset,
        partition=partition,
        bandwidths=bandwidths,
        variant=variant,
        residuals=residuals,
        fitted=fitted,
        h_y=np.asarray(h_y, dtype=float).reshape(dataset.d_y),
        m_block=m_block,
        g_block=g_block,
    )


def eval_conditional(est: DensityEstimate, y, x, y_disc=None) -> float:
    """``f(y | x)`` at a single response / covariate pair."""
    y = np.atleast_1d(np.asarray(y, dtype=float)) if y is not None else np.zeros(0)
    y2 = None if y_disc is None else np.array([[y_disc]], dtype=float)
    return float(est.pdf(y.reshape(1, 1, -1), np.atleast_2d(x), y2)[0, 0])


def sample_conditional(est: DensityEstimate, x, count: int, rng):
    """Simulate ``count`` responses from the fitted conditional density at ``x``."""
    return est.sample(x, count, rng)


class ResidualDensity:
    """Univariate kernel density of parametric-model residuals."""

    def __init__(self, residuals: np.ndarray, bandwidth: float):
        self.residuals = np.asarray(residuals, dtype=float).reshape(-1)
        self.bandwidth = float(bandwidth)

    def __call__(self, e) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        u = (e.reshape(-1, 1) - self.residuals[None, :]) / self.bandwidth
        dens = np.exp(-0.5 * u * u).mean(axis=1) / (self.bandwidth * math.sqrt(2.0 * math.pi))
        return dens.reshape(e.shape)

    def sample(self, count: int, rng) -> np.ndarray:
        gen = as_generator(rng)
        donors = gen.integers(0, self.residuals.size, size=count)
        return self.residuals[donors] + self.bandwidth * gen.standard_normal(count)


def marginal_residual_density(dataset: Dataset, mean_fn, theta, c: float) -> ResidualDensity:
    """Kernel density of ``E_i(theta) = Y_i - mean_fn(X_i, theta)``."""
    if dataset.d_y != 1:
        raise ValueError("marginal residual density needs exactly one continuous response")
    if not c > 0:
        raise ValueError("bandwidth must be positive")
    resid = dataset.y_cont[:, 0] - np.asarray(mean_fn(dataset.covariates, theta), dtype=float).reshape(-1)
    return ResidualDensity(resid, c)
