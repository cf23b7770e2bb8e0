"""Numerical minimisation helpers shared by the MLE and the M-steps."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.optimize import minimize

from ..errors import ConvlosError


def guarded(fun):
    """Wrap ``fun`` so domain errors and non-finite values become ``+inf``."""

    def wrapped(x):
        try:
            with np.errstate(all="ignore"):
                value = float(fun(x))
        except (ConvlosError, FloatingPointError, OverflowError):
            return np.inf
        return value if np.isfinite(value) else np.inf

    return wrapped


def minimize_free(fun, x0, optimizer="QuasiNewtonFD", maxiter=200, gtol=1e-8, xatol=1e-8):
    """Minimise ``fun`` from ``x0``; returns ``(x, fx, success, message)``.

    ``QuasiNewtonFD`` is BFGS with central-difference gradients;
    ``NelderMead`` is the derivative-free simplex method.
    """
    x0 = np.asarray(x0, dtype=float)
    f = guarded(fun)
    f0 = f(x0)
    if x0.size == 0:
        return x0, f0, True, "no free parameters"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if optimizer == "NelderMead":
            res = minimize(f, x0, method="Nelder-Mead",
                           options={"maxiter": maxiter * max(1, x0.size), "xatol": xatol,
                                    "fatol": gtol, "adaptive": x0.size > 2})
        else:
            res = minimize(f, x0, method="BFGS", jac="3-point",
                           options={"maxiter": maxiter, "gtol": gtol})
    x, fx = np.asarray(res.x, dtype=float), float(res.fun)
    if not np.isfinite(fx) or fx > f0:
        return x0, f0, False, str(res.message)
    return x, fx, bool(res.success), str(res.message)


def central_gradient(fun, x, rel_step=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        g[j] = (fun(up) - fun(down)) / (2 * h)
    return g


def central_hessian(fun, x, rel_step=1e-4):
    x = np.asarray(x, dtype=float)
    d = x.size
    h = rel_step * np.maximum(1.0, np.abs(x))
    f0 = fun(x)
    H = np.empty((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h[i]
        H[i, i] = (fun(x + ei) - 2 * f0 + fun(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(d)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej)
                                 + fun(x - ei - ej)) / (4 * h[i] * h[j])
    return H


def newton_polish(fun, x, steps=4, gtol=1e-10):
    """A few damped Newton steps with finite-difference derivatives.

    Only steps that lower ``fun`` are taken, so the result is never worse than ``x``.
    """
    f = guarded(fun)
    x = np.asarray(x, dtype=float)
    fx = f(x)
    for _ in range(steps):
        g = central_gradient(f, x)
        if not np.all(np.isfinite(g)) or np.max(np.abs(g)) < gtol:
            break
        H = central_hessian(f, x)
        try:
            w, V = np.linalg.eigh(0.5 * (H + H.T))
        except np.linalg.LinAlgError:
            break
        w = np.maximum(np.abs(w), 1e-8 * max(1.0, np.abs(w).max()))
        step = -V @ ((V.T @ g) / w)
        t = 1.0
        for _ in range(20):
            cand = x + t * step
            fc = f(cand)
            if fc < fx:
                x, fx = cand, fc
                break
            t *= 0.5
        else:
            break
    return x, fx
