"""Classical EM and the two-dimensional (class, lag) EM.

Classical EM treats the class ``s`` (short/long) as the only latent variable,
so its M-step for the long component maximises a weighted convolution
log-density numerically.  The 2d-EM also treats the lag ``c`` as latent:
E-1 gives the class posterior by summing the joint over ``c``, E-2 the lag
posterior of long stays, and the M-step then only involves single-component
densities (closed forms wherever they exist).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import minimize_scalar

from ..convolution import conv_logpdf, lag_log_joint, row_logsumexp
from ..distributions import (
    BINOMIAL,
    LOGNORMAL,
    MULTINOMIAL,
    NEGBIN,
    POISSON,
    CountDistSpec,
    cont_logpdf,
    count_logpmf,
)
from ..errors import ComponentStarvationError, DegeneratePointError
from ..links import link_inverse
from ..mixture import MixtureModel, check_observations, component_logpdfs
from .config import FitConfig
from .optim import minimize_free
from .params import CONT, SHORT, Layout

PI_EPS = 1e-12
SIGMA_FLOOR = 1e-6
_INNER_ITERS = 50


def _normalise(log_short, log_long):
    total = np.logaddexp(log_short, log_long)
    bad = ~np.isfinite(total)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DegeneratePointError(f"row {row}: mixture density is zero", row=row)
    resp = np.empty((total.size, 2))
    resp[:, 0] = np.exp(log_short - total)
    resp[:, 1] = np.exp(log_long - total)
    return resp


def em_e_step(model: MixtureModel, y, matrix=None) -> np.ndarray:
    """Class posteriors; column 0 is short stay, column 1 long stay."""
    y = check_observations(y)
    log_short, log_long = component_logpdfs(model, y, matrix)
    return _normalise(log_short, log_long)


def em2d_e_step(model: MixtureModel, y, matrix=None):
    """E-1 and E-2 of the 2d-EM.

    Returns ``(resp, grid, post)`` where ``resp`` are the class posteriors
    obtained by summing the joint ``f(y, c, s=1)`` over the lag grid and
    ``post[i, j] = P(c = grid[j] | y_i, s = 1)``.
    """
    y = check_observations(y)
    resolved = model.resolve(matrix, y.size)
    pi = resolved.pi
    log_short = (math.log1p(-pi) if pi < 1 else -math.inf) + cont_logpdf(resolved.short, y)
    grid, terms = lag_log_joint(resolved.long, y)
    if pi > 0:
        terms += math.log(pi)
        log_long = row_logsumexp(terms)
        with np.errstate(invalid="ignore"):
            post = np.exp(terms - log_long[:, None])
        post[~np.isfinite(log_long)] = 0.0
    else:
        log_long = np.full(y.size, -np.inf)
        post = np.zeros_like(terms)
    return _normalise(log_short, log_long), grid, post


# --------------------------------------------------------------------------- #
# M-step building blocks
# --------------------------------------------------------------------------- #


def _check_weights(resp):
    totals = resp.sum(axis=0)
    for j, name in enumerate(("short", "long")):
        if not totals[j] > np.finfo(float).tiny:
            raise ComponentStarvationError(f"the {name}-stay component received zero responsibility")
    return totals


def _set(theta, layout, target, value):
    slot = layout.slot(target)
    theta[slot.start] = float(link_inverse(slot.link, value))


def _optimise_block(theta, layout, targets, objective, optimizer):
    """Minimise ``objective(model)`` over the coordinates of ``targets``; never worsens it."""
    idx = layout.index(targets)
    if idx.size == 0:
        return theta

    def sub(x):
        full = theta.copy()
        full[idx] = x
        return objective(layout.unpack(full))

    x, _, _, _ = minimize_free(sub, theta[idx], optimizer, maxiter=_INNER_ITERS, gtol=1e-9)
    out = theta.copy()
    out[idx] = x
    return out


def _update_pi_short(theta, layout, model, y, resp, totals, optimizer, matrix):
    n = y.size
    if "pi" in layout:
        _set(theta, layout, "pi", min(max(totals[1] / n, PI_EPS), 1.0 - PI_EPS))
    free_short = layout.free(SHORT)
    if not free_short:
        return theta
    w0 = resp[:, 0]
    logy = np.log(y)
    if all(layout.is_constant(t) for t in SHORT):
        mu = model.short.mu
        if "mu_S" in layout:
            mu = float(w0 @ logy / totals[0])
            _set(theta, layout, "mu_S", mu)
        if "sigma_S" in layout:
            var = float(w0 @ np.square(logy - mu) / totals[0])
            _set(theta, layout, "sigma_S", max(math.sqrt(var), SIGMA_FLOOR))
        return theta

    def objective(m):
        r = m.resolve(matrix, n)
        return -float(w0 @ cont_logpdf(r.short, y)) / totals[0]

    return _optimise_block(theta, layout, free_short, objective, optimizer)


def em_m_step(y, resp, model: MixtureModel, config: FitConfig = FitConfig(), matrix=None) -> MixtureModel:
    """Closed-form ``pi`` and short-stay updates, numerical long-stay update."""
    y = check_observations(y)
    layout = Layout(model, config.fixed)
    totals = _check_weights(resp)
    theta = _update_pi_short(layout.pack(model), layout, model, y, resp, totals,
                             config.optimizer, matrix)
    w1 = resp[:, 1]
    pos = w1 > 0
    y_l, w_l = y[pos], w1[pos]
    m_l = matrix.take(pos) if matrix is not None else None

    def objective(m):
        r = m.resolve(m_l, y_l.size)
        return -float(w_l @ conv_logpdf(r.long, y_l)) / totals[1]

    theta = _optimise_block(theta, layout, layout.long_targets(), objective, config.optimizer)
    return layout.unpack(theta)


def _cont_update(theta, layout, model, y, grid, W, optimizer, matrix):
    free = layout.free(CONT)
    if not free:
        return theta
    n = y.size
    resid = y[:, None] - grid[None, :]
    lognormal = model.long.cont.family == LOGNORMAL
    if lognormal:
        with np.errstate(divide="ignore", invalid="ignore"):
            resid = np.where(resid > 0, np.log(np.where(resid > 0, resid, 1.0)), 0.0)
        W = np.where(y[:, None] - grid[None, :] > 0, W, 0.0)
    total = W.sum()
    sigma_const = layout.is_constant("sigma")
    m_slot_ok = "m" not in layout or layout.is_constant("m") or layout.slot("m").link == "identity"
    if sigma_const and m_slot_ok:
        resolved = model.resolve(matrix, n)
        m_rows = np.broadcast_to(np.asarray(resolved.long.cont.mu, dtype=float), (n,))
        if "m" in layout:
            slot = layout.slot("m")
            if slot.is_constant:
                m = float((W * resid).sum() / total)
                _set(theta, layout, "m", m)
                m_rows = np.full(n, m)
            else:
                D = W.sum(axis=1)
                keep = D > 0
                z = (W[keep] * resid[keep]).sum(axis=1) / D[keep]
                X = matrix.columns(slot.columns)[keep]
                root = np.sqrt(D[keep])
                # lstsq copes with collinear or constant columns (minimum-norm beta)
                beta = np.linalg.lstsq(X * root[:, None], z * root, rcond=None)[0]
                theta[slot.index] = beta
                m_rows = matrix.columns(slot.columns) @ beta
        if "sigma" in layout:
            var = float((W * np.square(resid - m_rows[:, None])).sum() / total)
            _set(theta, layout, "sigma", max(math.sqrt(var), SIGMA_FLOOR))
        return theta

    raw = y[:, None] - grid[None, :]

    def objective(m):
        r = m.resolve(matrix, n)
        logf = cont_logpdf(r.long.cont.column(), raw)
        return -float(np.where(W > 0, W * logf, 0.0).sum()) / total

    return _optimise_block(theta, layout, free, objective, optimizer)


def _count_update(theta, layout, model, grid, W, optimizer, matrix, n):
    free = layout.count_targets()
    if not free:
        return theta
    count = model.long.count
    all_free = [t for t in model.targets() if t not in ("pi",) + SHORT + CONT]
    closed = set(free) == set(all_free) and all(layout.is_constant(t) for t in free)
    if count.family == MULTINOMIAL:
        closed = "weights" in layout
    if closed:
        n_c = W.sum(axis=0)
        total = n_c.sum()
        mean_c = float(n_c @ grid / total)
        if count.family == POISSON:
            _set(theta, layout, "lambda", max(mean_c, 1e-12))
            return theta
        if count.family == BINOMIAL:
            _set(theta, layout, "p", min(max(mean_c / count.n, PI_EPS), 1 - PI_EPS))
            return theta
        if count.family == MULTINOMIAL:
            w = np.zeros(len(count.weights))
            w[grid.astype(int)] = n_c
            w = np.maximum(w / w.sum(), 1e-300)
            slot = layout.slot("weights")
            theta[slot.index] = np.log(w[1:]) - np.log(w[0])
            return theta
        if count.family == NEGBIN:
            return _negbin_profile(theta, layout, model, grid, n_c, mean_c)

    total = W.sum()
    grouped = matrix.row_groups if matrix is not None else None
    if grouped is not None:
        # parameters depend on the design row only: pool lag weights per distinct row
        codes, reps = grouped
        Wg = np.zeros((reps.n_rows, W.shape[1]))
        np.add.at(Wg, codes, W)

        def objective(m):
            logp = count_logpmf(m.resolve(reps, reps.n_rows).long.count.column(), grid)
            return -float(np.where(Wg > 0, Wg * logp, 0.0).sum()) / total
    else:
        def objective(m):
            logp = count_logpmf(m.resolve(matrix, n).long.count.column(), grid)
            return -float(np.where(W > 0, W * logp, 0.0).sum()) / total

    return _optimise_block(theta, layout, free, objective, optimizer)


def _negbin_profile(theta, layout, model, grid, n_c, mean_c):
    """Weighted negative binomial MLE: ``p = r / (r + mean)`` profiled over ``log r``."""
    total = n_c.sum()

    def neg(log_r):
        r = math.exp(log_r)
        p = r / (r + mean_c)
        if not 0 < p < 1:
            return np.inf
        return -float(n_c @ count_logpmf(CountDistSpec.negbin(r, p), grid)) / total

    r0 = float(model.long.count.r)
    f0 = neg(math.log(r0)) if mean_c > 0 else np.inf
    res = minimize_scalar(neg, bracket=(math.log(r0) - 0.5, math.log(r0) + 0.5),
                          options={"xtol": 1e-12})
    old = -float(n_c @ count_logpmf(model.long.count, grid)) / total
    if np.isfinite(res.fun) and res.fun <= min(old, f0) and -30 < res.x < 30:
        r = math.exp(res.x)
        _set(theta, layout, "r", r)
        _set(theta, layout, "p", r / (r + mean_c))
    return theta


def em2d_m_step(y, resp, grid, post, model: MixtureModel, config: FitConfig = FitConfig(),
                matrix=None) -> MixtureModel:
    """M-step on the fully weighted complete-data objective of the 2d-EM."""
    y = check_observations(y)
    layout = Layout(model, config.fixed)
    totals = _check_weights(resp)
    theta = _update_pi_short(layout.pack(model), layout, model, y, resp, totals,
                             config.optimizer, matrix)
    W = resp[:, 1:2] * post
    theta = _cont_update(theta, layout, model, y, grid, W, config.optimizer, matrix)
    theta = _count_update(theta, layout, model, grid, W, config.optimizer, matrix, y.size)
    return layout.unpack(theta)
