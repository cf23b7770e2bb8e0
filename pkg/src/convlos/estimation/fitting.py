"""Estimator drivers: direct maximum likelihood, EM and 2d-EM, with restarts."""

from __future__ import annotations

import logging
import time

import numpy as np

from ..errors import ComponentStarvationError, ConvlosError, InitError
from ..mixture import MixtureModel, check_observations, mix_loglik
from .config import FitConfig, FitResult, MultiStart
from .em import em2d_e_step, em2d_m_step, em_e_step, em_m_step
from .init import initialize
from .optim import guarded, minimize_free, newton_polish
from .params import Layout

log = logging.getLogger(__name__)


def _safe_loglik(model, y, matrix):
    try:
        with np.errstate(all="ignore"):
            value = mix_loglik(model, y, matrix)
    except ConvlosError:
        return -np.inf
    return value if np.isfinite(value) else -np.inf


def _squarem(m0, m1, m2, ll2, y, matrix, layout, step):
    """Safeguarded squared extrapolation from two chained EM maps.

    Returns ``(model, loglik)`` for the stabilised extrapolated point when it
    beats the plain double step ``m2``, otherwise ``None``.
    """
    t0, t1, t2 = layout.pack(m0), layout.pack(m1), layout.pack(m2)
    r = t1 - t0
    v = t2 - t1 - r
    nv = np.linalg.norm(v)
    if not (nv > 0 and np.isfinite(nv)):
        return None
    alpha = min(-np.linalg.norm(r) / nv, -1.0)
    for _ in range(6):
        if alpha > -1.0 + 1e-12:
            return None
        try:
            cand = step(layout.unpack(t0 - 2 * alpha * r + alpha**2 * v))
        except ConvlosError:
            cand = None
        if cand is not None:
            ll = _safe_loglik(cand, y, matrix)
            if ll > ll2:
                return cand, ll
        alpha = 0.5 * (alpha - 1.0)
    return None


def _iterate(y, model, config, matrix, step):
    """Alternate E and M steps from ``model`` until a stopping rule fires.

    With ``acceleration="squarem"`` an iteration chains two EM maps and then
    tries a squared extrapolation, kept only when it improves on the plain
    double step; the log-likelihood therefore never decreases either way.
    Accepted extrapolations make the per-cycle gain erratic, so the loglik
    rule then looks at the gain over the last three cycles.
    """
    window = 3 if config.acceleration == "squarem" else 1
    layout = Layout(model, config.fixed)
    ll = _safe_loglik(model, y, matrix)
    if not np.isfinite(ll):
        raise InitError("log-likelihood is not finite at the starting point")
    trace = [ll]
    flagged = []
    converged, reason = False, "max_iters reached"
    it = 0
    for it in range(1, config.max_iters + 1):
        try:
            new = step(model)
            ll_new = _safe_loglik(new, y, matrix)
            if config.acceleration == "squarem" and ll_new >= ll:
                second = step(new)
                ll_second = _safe_loglik(second, y, matrix)
                if ll_second >= ll_new:
                    proposal = _squarem(model, new, second, ll_second, y, matrix, layout, step)
                    new, ll_new = proposal or (second, ll_second)
        except ComponentStarvationError as exc:
            reason = f"component starvation: {exc}"
            break
        if not ll_new >= ll:
            # generalised-EM guard: keep the previous iterate
            flagged.append(it)
            if ll - ll_new <= config.loglik_tol:
                converged, reason = True, "loglik_tol (no further ascent)"
            else:
                reason = f"ascent failure at iteration {it}"
            break
        dparam = float(np.max(np.abs(layout.pack(new) - layout.pack(model)), initial=0.0))
        model, ll = new, ll_new
        trace.append(ll)
        if len(trace) > window and trace[-1] - trace[-1 - window] < config.loglik_tol:
            converged, reason = True, "loglik_tol"
            break
        if dparam < config.param_tol:
            converged, reason = True, "param_tol"
            break
    return model, trace, converged, reason, it, flagged


def _em_single(y, model, config, matrix):
    def step(m):
        return em_m_step(y, em_e_step(m, y, matrix), m, config, matrix)

    return _iterate(y, model, config, matrix, step)


def _em2d_single(y, model, config, matrix):
    def step(m):
        resp, grid, post = em2d_e_step(m, y, matrix)
        return em2d_m_step(y, resp, grid, post, m, config, matrix)

    return _iterate(y, model, config, matrix, step)


def _mle_single(y, model, config, matrix):
    layout = Layout(model, config.fixed)
    n = y.size

    def objective(theta):
        return -mix_loglik(layout.unpack(theta), y, matrix) / n

    theta0 = layout.pack(model)
    f = guarded(objective)
    if not np.isfinite(f(theta0)):
        raise InitError("log-likelihood is not finite at the starting point")
    trace = [-f(theta0) * n]
    theta, fx, ok, message = minimize_free(objective, theta0, config.optimizer,
                                           maxiter=config.max_iters, gtol=1e-9)
    trace.append(-fx * n)
    theta, fx = newton_polish(objective, theta)
    fitted = layout.unpack(theta)
    ll = mix_loglik(fitted, y, matrix)
    if ll > trace[-1]:
        trace.append(ll)
    converged = ok or abs(trace[-1] - trace[-2]) < config.loglik_tol if len(trace) > 2 else ok
    reason = "optimizer converged" if converged else f"optimizer stopped: {message}"
    return fitted, trace, converged, reason, len(trace) - 1, []


_SINGLE = {"MLE": _mle_single, "EM": _em_single, "EM2D": _em2d_single}


def _fit(y, template: MixtureModel, config: FitConfig, matrix, method):
    y = check_observations(y)
    if y.size == 0:
        raise InitError("cannot fit an empty dataset")
    started = time.perf_counter()
    n_starts = config.init.k if isinstance(config.init, MultiStart) else 1
    best = None
    logliks = []
    warnings = []
    for start in range(n_starts):
        init = initialize(y, template, config.init, start=start, seed=config.seed, fixed=config.fixed)
        if init.warning and init.warning not in warnings:
            warnings.append(init.warning)
        try:
            outcome = _SINGLE[method](y, init.model, config, matrix)
        except InitError as exc:
            if n_starts == 1:
                raise
            log.warning("start %d skipped: %s", start, exc)
            logliks.append(float("-inf"))
            continue
        logliks.append(outcome[1][-1])
        if best is None or outcome[1][-1] > best[1][-1]:
            best = outcome
    if best is None:
        raise InitError("no start produced a finite log-likelihood")
    model, trace, converged, reason, iterations, flagged = best
    result = FitResult(
        theta_hat=model, loglik=trace[-1], loglik_trace=trace, converged=converged, reason=reason,
        method=method, seed=config.seed, n_restarts_used=n_starts, iterations=iterations,
        flagged_iterations=flagged, warnings=warnings, restart_logliks=logliks,
    )
    if method == "EM":
        result.responsibilities = em_e_step(model, y, matrix)
    else:
        resp, grid, post = em2d_e_step(model, y, matrix)
        result.responsibilities = resp
        if method == "EM2D":
            result.count_posterior, result.count_support = post, grid
    result.elapsed_seconds = time.perf_counter() - started
    return result


def fit_mle(y, template: MixtureModel, config: FitConfig = FitConfig(method="MLE"), matrix=None) -> FitResult:
    """Maximise the observed-data log-likelihood directly over the link scale."""
    return _fit(y, template, config, matrix, "MLE")


def fit_em(y, template: MixtureModel, config: FitConfig = FitConfig(method="EM"), matrix=None) -> FitResult:
    return _fit(y, template, config, matrix, "EM")


def fit_em2d(y, template: MixtureModel, config: FitConfig = FitConfig(method="EM2D"), matrix=None) -> FitResult:
    return _fit(y, template, config, matrix, "EM2D")


def fit(y, template: MixtureModel, config: FitConfig = FitConfig(), matrix=None) -> FitResult:
    """Run the estimator named by ``config.method``."""
    return _fit(y, template, config, matrix, config.method)
