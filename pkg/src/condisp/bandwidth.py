"""Leave-one-out cross-validated bandwidths, chosen by grid search.

Each selector runs separately within every level of the relevant discrete
covariates and returns the mean of the per-level winners.  Ties go to the
larger bandwidth.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import CovariatePartition, Dataset, validate
from .errors import DegenerateBandwidthError
from .kernels import (
    DENSITY_FLOOR,
    BandwidthSet,
    KernelBlock,
    _nw_from_block,
    column_scales,
    log_kernel_matrix,
)

LOG_FLOOR = math.log(DENSITY_FLOOR)


def default_grid(points: int = 15, lo: float = 0.05, hi: float = 5.0) -> np.ndarray:
    """Log-spaced candidate multipliers (in standardized units)."""
    return np.geomspace(lo, hi, points)


@dataclass
class BandwidthChoice:
    bandwidth: float
    grid: np.ndarray
    scores: np.ndarray
    per_level: dict = field(default_factory=dict)
    degenerate: bool = False


def select_from_grid(grid, scores, maximize: bool) -> int:
    """Index of the best score; exact ties resolve to the larger bandwidth."""
    grid = np.asarray(grid, dtype=float)
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(grid, kind="stable")
    best = None
    for i in order:
        s = scores[i]
        if not np.isfinite(s) and not (maximize and s == -np.inf) and not (not maximize and s == np.inf):
            continue
        if best is None:
            best = i
            continue
        b = scores[best]
        if (maximize and s >= b) or (not maximize and s <= b):
            best = i
    if best is None:
        raise DegenerateBandwidthError("no grid point produced a usable cross-validation score")
    return int(best)


def _grid(grid) -> np.ndarray:
    g = np.atleast_1d(np.asarray(grid, dtype=float))
    if g.size == 0 or np.any(~np.isfinite(g) | (g <= 0)):
        raise ValueError("bandwidth grid must be a nonempty set of positive reals")
    return g


def _levels(block: KernelBlock):
    for code in np.unique(block.codes):
        yield tuple(float(v) for v in block.levels[code]) if block.disc else (), np.flatnonzero(block.codes == code)


def _aggregate(grid, level_scores: dict, maximize: bool, what: str) -> BandwidthChoice:
    if not level_scores:
        raise DegenerateBandwidthError(f"{what}: every discrete level is too small for leave-one-out")
    winners = {}
    for key, scores in level_scores.items():
        try:
            winners[key] = float(grid[select_from_grid(grid, scores, maximize)])
        except DegenerateBandwidthError:
            continue
    if not winners:
        raise DegenerateBandwidthError(f"{what}: every grid point is degenerate")
    total = np.sum(np.vstack(list(level_scores.values())), axis=0)
    return BandwidthChoice(float(np.mean(list(winners.values()))), grid, total, winners)


def cv_nw_bandwidth(dataset: Dataset, partition: CovariatePartition, grid, x_scale=None) -> BandwidthChoice:
    """Minimise the leave-one-out squared error of the Nadaraya-Watson centering fit."""
    validate(dataset, partition)
    grid = _grid(grid)
    if dataset.n < 3:
        raise ValueError("cross-validation needs n >= 3")
    scale = np.ones(dataset.d_x) if x_scale is None else np.asarray(x_scale, dtype=float)
    block = KernelBlock(dataset, partition.centering, 1.0, scale)
    y = dataset.y_cont
    level_scores = {}
    for key, rows in _levels(block):
        if rows.size < 2:
            continue
        data = block.data[rows]
        scores = np.empty(grid.size)
        for g, c in enumerate(grid):
            lk = log_kernel_matrix(data, data, c * block.scale)
            np.fill_diagonal(lk, -np.inf)
            w = np.exp(lk)
            denom = w.sum(axis=1)
            if np.any(denom <= 0):
                scores[g] = np.inf
                continue
            pred = (w @ y[rows]) / denom[:, None]
            scores[g] = float(np.sum((y[rows] - pred) ** 2))
        level_scores[key] = scores
    if level_scores and all(np.all(np.isinf(s)) for s in level_scores.values()):
        raise DegenerateBandwidthError("every grid point leaves some observation without neighbours")
    return _aggregate(grid, level_scores, maximize=False, what="Nadaraya-Watson bandwidth")


def _loo_log_density(lk: np.ndarray) -> np.ndarray:
    """Leave-one-out log of the (unnormalised) kernel sum, floored."""
    lk = lk.copy()
    np.fill_diagonal(lk, -np.inf)
    vals = logsumexp(lk, axis=1) - math.log(max(lk.shape[0] - 1, 1))
    return np.maximum(vals, LOG_FLOOR)


def cv_marginal_bandwidth(dataset: Dataset, partition: CovariatePartition, grid, x_scale=None) -> BandwidthChoice:
    """Maximise the leave-one-out log likelihood of the conditioning covariates' density."""
    validate(dataset, partition)
    grid = _grid(grid)
    if dataset.n < 3:
        raise ValueError("cross-validation needs n >= 3")
    scale = np.ones(dataset.d_x) if x_scale is None else np.asarray(x_scale, dtype=float)
    block = KernelBlock(dataset, partition.conditioning, 1.0, scale)
    level_scores = {}
    floored = True
    for key, rows in _levels(block):
        if rows.size < 2:
            continue
        data = block.data[rows]
        scores = np.empty(grid.size)
        for g, c in enumerate(grid):
            vals = _loo_log_density(log_kernel_matrix(data, data, c * block.scale))
            floored &= bool(np.all(vals <= LOG_FLOOR))
            scores[g] = float(vals.sum())
        level_scores[key] = scores
    choice = _aggregate(grid, level_scores, maximize=True, what="conditioning bandwidth")
    if floored and block.cont:
        choice.degenerate = True
        warnings.warn("all leave-one-out densities hit the floor; bandwidth choice is degenerate", RuntimeWarning)
    return choice


def cv_conditional_bandwidth(
    dataset: Dataset,
    partition: CovariatePartition,
    c_m: float,
    c_g: float,
    grid,
    x_scale=None,
    y_scale=None,
) -> BandwidthChoice:
    """Maximise the leave-one-out joint log density of (conditioning covariates, residual).

    The conditioning-covariate normaliser does not depend on the response
    bandwidth, so only the joint numerator is scored.
    """
    validate(dataset, partition)
    grid = _grid(grid)
    if dataset.n < 3:
        raise ValueError("cross-validation needs n >= 3")
    xs = np.ones(dataset.d_x) if x_scale is None else np.asarray(x_scale, dtype=float)
    ys = np.ones(dataset.d_y) if y_scale is None else np.asarray(y_scale, dtype=float)
    m_block = KernelBlock(dataset, partition.centering, c_m, xs)
    g_block = KernelBlock(dataset, partition.conditioning, c_g, xs)
    if m_block.empty:
        resid = dataset.y_cont
    else:
        resid = dataset.y_cont - _nw_from_block(m_block, dataset.y_cont, dataset.covariates)
    level_scores = {}
    for key, rows in _levels(g_block):
        if rows.size < 2:
            continue
        code = g_block.codes[rows[0]]
        lx = log_kernel_matrix(g_block.data[rows], g_block.data[rows], g_block.bandwidth(code))
        if dataset.y_disc is not None:
            y2 = dataset.y_disc[rows]
            lx = np.where(y2[:, None] == y2[None, :], lx, -np.inf)
        e = resid[rows]
        scores = np.empty(grid.size)
        for g, c in enumerate(grid):
            vals = _loo_log_density(lx + log_kernel_matrix(e, e, c * ys))
            scores[g] = float(vals.sum())
        level_scores[key] = scores
    return _aggregate(grid, level_scores, maximize=True, what="response bandwidth")


def select_bandwidths(
    dataset: Dataset,
    partition: CovariatePartition,
    grid=None,
    *,
    standardize: bool = True,
    per_level: bool = False,
    return_choices: bool = False,
):
    """Run the three selectors in sequence and assemble a :class:`BandwidthSet`.

    Centering bandwidth first (squared error), then the conditioning
    bandwidth (marginal likelihood), then the response bandwidth with the
    first two held fixed.  With ``standardize`` the multipliers act on
    columns scaled by their sample standard deviation (residual standard
    deviation for the response).
    """
    grid = default_grid() if grid is None else _grid(grid)
    x_scale = column_scales(dataset.x_cont) if standardize else np.ones(dataset.d_x)
    choices = {}
    c_m: float | dict = 1.0
    c_g: float | dict = 1.0
    if partition.centering and dataset.d_y > 0:
        ch = cv_nw_bandwidth(dataset, partition, grid, x_scale)
        choices["c_m"] = ch
        c_m = ch.per_level if per_level else ch.bandwidth
    if partition.conditioning:
        ch = cv_marginal_bandwidth(dataset, partition, grid, x_scale)
        choices["c_g"] = ch
        c_g = ch.per_level if per_level else ch.bandwidth
    y_scale = None
    c_y = 1.0
    if dataset.d_y > 0:
        m_block = KernelBlock(dataset, partition.centering, c_m, x_scale)
        if m_block.empty:
            resid = dataset.y_cont
        else:
            resid = dataset.y_cont - _nw_from_block(m_block, dataset.y_cont, dataset.covariates)
        y_scale = column_scales(resid) if standardize else np.ones(dataset.d_y)
        ch = cv_conditional_bandwidth(dataset, partition, c_m, c_g, grid, x_scale, y_scale)
        choices["c_y"] = ch
        c_y = ch.bandwidth
    bw = BandwidthSet(c_m, c_g, c_y, x_scale=x_scale if dataset.d_x else None, y_scale=y_scale)
    return (bw, choices) if return_choices else bw
