"""Long-stay law: an integer discharge lag plus a continuous recovery period.

The density of ``K + E`` is the discrete convolution
``sum_k f_E(y - k) P(K = k)``.  The infinite sum is evaluated over a finite
grid of lags that covers every term able to contribute at double precision:

* log-normal ``E``: only ``k < y`` contributes, so the grid is ``0..ceil(y)-1``;
* normal ``E``: terms with ``|y - k - m| > window * sigma`` are dropped;
* finite-support counts are additionally clipped to their support.

Grids are shared across a batch of observations (the union of the per-row
windows), which makes every row exact to within the window bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .distributions import (
    LOGNORMAL,
    ContDistSpec,
    CountDistSpec,
    cont_cdf,
    cont_logpdf,
    cont_mean,
    cont_sample,
    count_logpmf,
    count_mean,
    count_sample,
    count_var,
    cont_var,
)
from .errors import ParameterDomainError, TruncationError
from .links import group_rows, split_groups

WINDOW_SIGMAS = 10.0
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
MAX_GRID = 100_000
_BLOCK = 1 << 21
# row-wise parameters with at most this many distinct rows are evaluated per group
MAX_GROUPS = 256


@dataclass(frozen=True)
class ConvolutiveLongStay:
    """``Y_L = K + E`` with ``K ~ count`` and ``E ~ cont`` independent."""

    count: CountDistSpec
    cont: ContDistSpec
    trunc_tol: float = 1e-10

    def __post_init__(self):
        if not (0.0 < self.trunc_tol <= 1e-3):
            raise ParameterDomainError(f"trunc_tol must lie in (0, 1e-3], got {self.trunc_tol}")

    def take(self, rows):
        return ConvolutiveLongStay(self.count.take(rows), self.cont.take(rows), self.trunc_tol)


def lag_grid(model: ConvolutiveLongStay, y, *, cumulative: bool = False) -> np.ndarray:
    """Integer lags needed to evaluate the convolution at every ``y``.

    With ``cumulative=True`` the grid starts at zero, as the CDF needs the
    full lower tail of ``K``.
    """
    y = np.asarray(y, dtype=float)
    cont = model.cont
    if cont.family == LOGNORMAL:
        lo, hi = 0, math.ceil(float(np.max(y))) - 1
    else:
        width = WINDOW_SIGMAS * float(np.max(cont.sigma))
        lo = max(0, math.floor(float(np.min(y)) - float(np.max(cont.mu)) - width))
        hi = math.ceil(float(np.max(y)) - float(np.min(cont.mu)) + width)
    if cumulative:
        lo = 0
    end = model.count.support_end
    if end is not None:
        hi = min(hi, end)
    hi = max(hi, 0)
    lo = min(lo, hi)
    if hi - lo + 1 > MAX_GRID:
        mass = _grid_mass(model.count, lo, lo + MAX_GRID - 1)
        raise TruncationError(
            f"convolution needs {hi - lo + 1} lag terms (cap {MAX_GRID})", mass=mass)
    return np.arange(lo, hi + 1, dtype=float)


def _grid_mass(count, lo, hi):
    k = np.arange(lo, hi + 1, dtype=float)
    logp = np.atleast_2d(count_logpmf(count.column(), k))
    return float(np.exp(logsumexp(logp, axis=1)).min())


def _blocks(n, width):
    step = max(1, _BLOCK // max(width, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def param_groups(model: ConvolutiveLongStay, n: int):
    """Split row-wise parameters into groups of identical rows.

    Returns a list of ``(row indices, scalar model)`` pairs, or ``None`` when
    the model has no row-wise parameters or too many distinct rows.
    Discrete covariates typically give a handful of groups.
    """
    if not _is_rowwise(model):
        return None
    fields = [("count", name) for name in ("r", "p", "lam", "nu")
              if getattr(model.count, name) is not None]
    fields += [("cont", "mu"), ("cont", "sigma")]
    cols = [np.broadcast_to(np.asarray(getattr(getattr(model, part), name), dtype=float), (n,))
            for part, name in fields]
    grouped = group_rows(np.column_stack(cols), MAX_GROUPS)
    if grouped is None:
        return None
    codes, size = grouped
    members = split_groups(codes, size)
    groups = []
    for idx in members:
        values = {f: float(c[idx[0]]) for f, c in zip(fields, cols)}
        count = CountDistSpec(model.count.family, n=model.count.n, weights=model.count.weights,
                              tol=model.count.tol,
                              **{name: values[("count", name)] for part, name in fields if part == "count"})
        cont = ContDistSpec(model.cont.family, values[("cont", "mu")], values[("cont", "sigma")])
        groups.append((idx, ConvolutiveLongStay(count, cont, model.trunc_tol)))
    return groups


def lag_log_joint(model: ConvolutiveLongStay, y, grid=None):
    """Log of ``f_E(y_i - k) P(K = k)`` on an ``(N, len(grid))`` array.

    Array parameters in ``model`` must have one entry per element of ``y``.
    Returns ``(grid, terms)``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if grid is None:
        grid = lag_grid(model, y)
    groups = param_groups(model, y.size)
    if groups is not None:
        out = np.empty((y.size, grid.size))
        for idx, sub in groups:
            out[idx] = lag_log_joint(sub, y[idx], grid)[1]
        return grid, out
    rowwise = model.count.is_rowwise
    lp_shared = None if rowwise else count_logpmf(model.count, grid)[None, :]
    out = np.empty((y.size, grid.size))
    if not _is_rowwise(model) and model.cont.family != LOGNORMAL:
        # in-place fast path for the common covariate-free normal case
        # same operation order as cont_logpdf, so a point-mass lag reproduces it bit for bit
        sigma = model.cont.sigma
        np.subtract.outer(y, grid, out=out)
        out -= model.cont.mu
        out /= sigma
        np.square(out, out=out)
        out *= -0.5
        out -= math.log(sigma) + _LOG_SQRT_2PI
        out += lp_shared
        return grid, out
    for rows in _blocks(y.size, grid.size):
        sub = model.take(rows) if _is_rowwise(model) else model
        lp = count_logpmf(sub.count.column(), grid) if rowwise else lp_shared
        out[rows] = cont_logpdf(sub.cont.column(), y[rows, None] - grid[None, :]) + lp
    return grid, out


def _is_rowwise(model):
    return model.count.is_rowwise or isinstance(model.cont.mu, np.ndarray) or isinstance(
        model.cont.sigma, np.ndarray)


def row_logsumexp(terms: np.ndarray) -> np.ndarray:
    """``log(sum(exp(terms), axis=1))`` for a 2-d array; rows of ``-inf`` give ``-inf``."""
    top = terms.max(axis=1)
    shift = np.where(np.isfinite(top), top, 0.0)
    rel = terms - shift[:, None]
    # avoids slow subnormal exp; clipped terms are below 1e-304 of the row max
    np.maximum(rel, -700.0, out=rel, where=np.isfinite(rel))
    np.exp(rel, out=rel)
    with np.errstate(divide="ignore"):
        return np.log(rel.sum(axis=1)) + shift


def conv_logpdf(model: ConvolutiveLongStay, y):
    y = np.asarray(y, dtype=float)
    flat = np.atleast_1d(y).ravel()
    if flat.size == 0:
        return np.zeros(y.shape)
    _, terms = lag_log_joint(model, flat)
    return row_logsumexp(terms).reshape(y.shape)


def conv_pdf(model: ConvolutiveLongStay, y):
    """Density of the long-stay law at ``y``."""
    return np.exp(conv_logpdf(model, y))


def conv_cdf(model: ConvolutiveLongStay, y):
    """``P(K + E <= y)`` as ``sum_k F_E(y - k) P(K = k)``."""
    y = np.asarray(y, dtype=float)
    flat = np.atleast_1d(y).ravel()
    if flat.size == 0:
        return np.zeros(y.shape)
    grid = lag_grid(model, flat, cumulative=True)
    groups = param_groups(model, flat.size)
    if groups is not None:
        out = np.empty(flat.size)
        for idx, sub in groups:
            out[idx] = conv_cdf(sub, flat[idx])
        return out.reshape(y.shape)
    rowwise = _is_rowwise(model)
    pmf_shared = None if model.count.is_rowwise else np.exp(count_logpmf(model.count, grid))[None, :]
    out = np.empty(flat.size)
    for rows in _blocks(flat.size, grid.size):
        sub = model.take(rows) if rowwise else model
        pmf = np.exp(count_logpmf(sub.count.column(), grid)) if pmf_shared is None else pmf_shared
        cdf = cont_cdf(sub.cont.column(), flat[rows, None] - grid[None, :])
        out[rows] = (cdf * pmf).sum(axis=1)
    return np.clip(out, 0.0, 1.0).reshape(y.shape)


def conv_mean(model: ConvolutiveLongStay):
    return count_mean(model.count) + cont_mean(model.cont)


def conv_var(model: ConvolutiveLongStay):
    return count_var(model.count) + cont_var(model.cont)


def conv_sample(model: ConvolutiveLongStay, n: int, rng=None):
    """``n`` independent draws of ``K + E``."""
    rng = np.random.default_rng(rng)
    lags = count_sample(model.count, n, rng)
    return lags + cont_sample(model.cont, n, rng)
