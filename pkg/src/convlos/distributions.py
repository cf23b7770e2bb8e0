"""Elementary probability laws used by the length-of-stay model.

Two continuous families describe the recovery period (and the short-stay
component): ``normal`` and ``lognormal``.  Five count families describe the
discharge lag: ``negbin``, ``poisson``, ``cmp`` (Conway-Maxwell-Poisson),
``binomial`` and ``multinomial``.

Parameters may be plain floats or numpy arrays; arrays hold one value per
observation when a parameter depends on covariates, and every function
broadcasts parameters against its argument with the usual numpy rules.
All densities are evaluated in log-space first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import gammaln, logsumexp, ndtr, xlog1py, xlogy

from .errors import ParameterDomainError, TruncationError

NORMAL = "normal"
LOGNORMAL = "lognormal"
CONT_FAMILIES = (NORMAL, LOGNORMAL)

NEGBIN = "negbin"
POISSON = "poisson"
CMP = "cmp"
BINOMIAL = "binomial"
MULTINOMIAL = "multinomial"
COUNT_FAMILIES = (NEGBIN, POISSON, CMP, BINOMIAL, MULTINOMIAL)

CMP_TOL = 1e-12
MAX_TERMS = 10**6
_CHUNK = 512
_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _as_param(value):
    arr = np.asarray(value, dtype=float)
    return float(arr) if arr.ndim == 0 else arr


def _check(cond, message):
    if not np.all(cond):
        raise ParameterDomainError(message)


# --------------------------------------------------------------------------- #
# Continuous laws
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ContDistSpec:
    """Normal or log-normal law.

    ``mu`` is the location (days for ``normal``, log-days for ``lognormal``)
    and ``sigma`` the scale.
    """

    family: str
    mu: float | np.ndarray
    sigma: float | np.ndarray

    def __post_init__(self):
        if self.family not in CONT_FAMILIES:
            raise ParameterDomainError(f"unknown continuous family {self.family!r}")
        object.__setattr__(self, "mu", _as_param(self.mu))
        object.__setattr__(self, "sigma", _as_param(self.sigma))
        _check(np.isfinite(self.mu), f"{self.family}: mu must be finite")
        _check(np.isfinite(self.sigma) & (np.asarray(self.sigma) > 0),
               f"{self.family}: sigma must be > 0, got {self.sigma}")

    @classmethod
    def normal(cls, mu, sigma):
        return cls(NORMAL, mu, sigma)

    @classmethod
    def lognormal(cls, mu, sigma):
        return cls(LOGNORMAL, mu, sigma)

    def column(self):
        """Reshape array parameters to ``(N, 1)`` for row-by-grid broadcasting."""
        return ContDistSpec(self.family, _col(self.mu), _col(self.sigma))

    def take(self, rows):
        return ContDistSpec(self.family, _take(self.mu, rows), _take(self.sigma, rows))


def _take(value, rows):
    return value[rows] if isinstance(value, np.ndarray) else value


def _col(value):
    return value[:, None] if isinstance(value, np.ndarray) and value.ndim == 1 else value


def cont_logpdf(spec: ContDistSpec, x):
    x = np.asarray(x, dtype=float)
    mu, sigma = spec.mu, spec.sigma
    if spec.family == NORMAL:
        z = (x - mu) / sigma
        return -0.5 * z * z - (np.log(sigma) + _LOG_SQRT_2PI)
    with np.errstate(divide="ignore", invalid="ignore"):
        logx = np.log(np.where(x > 0, x, 1.0))
        z = (logx - mu) / sigma
        out = -0.5 * z * z - (np.log(sigma) + _LOG_SQRT_2PI) - logx
    return np.where(x > 0, out, -np.inf)


def cont_pdf(spec: ContDistSpec, x):
    """Density of ``spec`` at ``x``; zero outside the log-normal support."""
    return np.exp(cont_logpdf(spec, x))


def cont_cdf(spec: ContDistSpec, x):
    x = np.asarray(x, dtype=float)
    if spec.family == NORMAL:
        return ndtr((x - spec.mu) / spec.sigma)
    with np.errstate(divide="ignore"):
        logx = np.log(np.where(x > 0, x, 1.0))
    return np.where(x > 0, ndtr((logx - spec.mu) / spec.sigma), 0.0)


def cont_mean(spec: ContDistSpec):
    if spec.family == NORMAL:
        return spec.mu
    return np.exp(spec.mu + 0.5 * np.square(spec.sigma))


def cont_var(spec: ContDistSpec):
    s2 = np.square(spec.sigma)
    if spec.family == NORMAL:
        return s2
    return np.expm1(s2) * np.exp(2.0 * spec.mu + s2)


def cont_sample(spec: ContDistSpec, n: int, rng=None):
    rng = np.random.default_rng(rng)
    draws = rng.normal(spec.mu, spec.sigma, size=n)
    return draws if spec.family == NORMAL else np.exp(draws)


# --------------------------------------------------------------------------- #
# Count laws
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class CountDistSpec:
    """A discharge-lag law on the non-negative integers.

    Only the fields used by ``family`` are set: ``r, p`` (negbin),
    ``lam`` (poisson), ``lam, nu`` (cmp), ``n, p`` (binomial) and
    ``weights`` (multinomial, support ``0..len(weights)-1``).
    """

    family: str
    r: Optional[float | np.ndarray] = None
    p: Optional[float | np.ndarray] = None
    lam: Optional[float | np.ndarray] = None
    nu: Optional[float | np.ndarray] = None
    n: Optional[int] = None
    weights: Optional[np.ndarray] = field(default=None)
    tol: float = CMP_TOL

    def __post_init__(self):
        fam = self.family
        if fam not in COUNT_FAMILIES:
            raise ParameterDomainError(f"unknown count family {fam!r}")
        for name in ("r", "p", "lam", "nu"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _as_param(value))
                _check(np.isfinite(getattr(self, name)), f"{fam}: {name} must be finite")
        if fam == NEGBIN:
            _check(np.asarray(self.r) > 0, f"negbin: r must be > 0, got {self.r}")
            _check((np.asarray(self.p) > 0) & (np.asarray(self.p) < 1),
                   f"negbin: p must lie in (0, 1), got {self.p}")
        elif fam == POISSON:
            _check(np.asarray(self.lam) >= 0, f"poisson: lambda must be >= 0, got {self.lam}")
        elif fam == CMP:
            _check(np.asarray(self.lam) > 0, f"cmp: lambda must be > 0, got {self.lam}")
            _check(np.asarray(self.nu) > 0, f"cmp: nu must be > 0, got {self.nu}")
        elif fam == BINOMIAL:
            if self.n is None or int(self.n) != self.n or self.n < 0:
                raise ParameterDomainError(f"binomial: n must be an integer >= 0, got {self.n}")
            object.__setattr__(self, "n", int(self.n))
            _check((np.asarray(self.p) >= 0) & (np.asarray(self.p) <= 1),
                   f"binomial: p must lie in [0, 1], got {self.p}")
        else:
            w = np.array(self.weights, dtype=float)
            if w.ndim != 1 or w.size == 0:
                raise ParameterDomainError("multinomial: weights must be a non-empty vector")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ParameterDomainError(f"multinomial: weights must be a simplex vector, sum={w.sum()!r}")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    @classmethod
    def negbin(cls, r, p):
        return cls(NEGBIN, r=r, p=p)

    @classmethod
    def poisson(cls, lam):
        return cls(POISSON, lam=lam)

    @classmethod
    def cmp(cls, lam, nu, tol=CMP_TOL):
        return cls(CMP, lam=lam, nu=nu, tol=tol)

    @classmethod
    def binomial(cls, n, p):
        return cls(BINOMIAL, n=n, p=p)

    @classmethod
    def multinomial(cls, weights):
        return cls(MULTINOMIAL, weights=weights)

    @property
    def finite_support(self) -> bool:
        return self.family in (BINOMIAL, MULTINOMIAL)

    @property
    def support_end(self) -> Optional[int]:
        """Largest value with positive mass for finite-support families."""
        if self.family == BINOMIAL:
            return self.n
        if self.family == MULTINOMIAL:
            return len(self.weights) - 1
        return None

    def column(self):
        """Reshape array parameters to ``(N, 1)`` for row-by-grid broadcasting."""
        kw = {name: _col(getattr(self, name)) for name in ("r", "p", "lam", "nu")}
        return CountDistSpec(self.family, n=self.n, weights=self.weights, tol=self.tol, **kw)

    def take(self, rows):
        kw = {name: _take(getattr(self, name), rows) for name in ("r", "p", "lam", "nu")}
        return CountDistSpec(self.family, n=self.n, weights=self.weights, tol=self.tol, **kw)

    @property
    def is_rowwise(self) -> bool:
        return any(isinstance(getattr(self, name), np.ndarray) for name in ("r", "p", "lam", "nu"))


def cmp_log_normalizer(lam: float, nu: float, tol: float = CMP_TOL) -> float:
    """Log of the CMP normalizer sum_j lam^j / (j!)^nu.

    Terms are accumulated in chunks; summation stops once a geometric bound on
    the remaining tail drops below ``tol`` times the partial sum.
    """
    if not (lam > 0 and np.isfinite(lam)):
        raise ParameterDomainError(f"cmp: lambda must be > 0, got {lam}")
    if not nu > 0:
        raise ParameterDomainError(f"cmp: series diverges for nu <= 0, got nu={nu}")
    if not tol > 0:
        raise ParameterDomainError(f"tol must be > 0, got {tol}")
    loglam = math.log(lam)
    log_tol = math.log(tol)
    total = -np.inf
    start = 0
    while start < MAX_TERMS:
        j = np.arange(start, start + _CHUNK, dtype=float)
        terms = j * loglam - nu * gammaln(j + 1.0)
        total = np.logaddexp(total, logsumexp(terms))
        last = j[-1]
        # ratio of consecutive terms; decreasing once it drops below one
        log_ratio = loglam - nu * math.log(last + 2.0)
        if log_ratio < 0.0:
            log_tail = terms[-1] + log_ratio - math.log(-math.expm1(log_ratio))
            if log_tail <= log_tol + total:
                return float(total)
        start += _CHUNK
    raise TruncationError(
        f"cmp normalizer did not converge within {MAX_TERMS} terms (lam={lam}, nu={nu})",
        mass=None,
    )


def cmp_normalizer(lam: float, nu: float, tol: float = CMP_TOL) -> float:
    return math.exp(cmp_log_normalizer(lam, nu, tol))


def _cmp_log_z(lam, nu, tol):
    lam_a, nu_a = np.broadcast_arrays(np.asarray(lam, dtype=float), np.asarray(nu, dtype=float))
    if lam_a.ndim == 0:
        return cmp_log_normalizer(float(lam_a), float(nu_a), tol)
    pairs, inverse = np.unique(np.stack([lam_a.ravel(), nu_a.ravel()], axis=1),
                               axis=0, return_inverse=True)
    logz = np.array([cmp_log_normalizer(a, b, tol) for a, b in pairs])
    return logz[inverse.ravel()].reshape(lam_a.shape)


def count_logpmf(spec: CountDistSpec, k):
    """Log probability mass at integer ``k`` (``-inf`` off the support)."""
    k = np.asarray(k, dtype=float)
    valid = k >= 0
    kk = np.where(valid, k, 0.0)
    fam = spec.family
    with np.errstate(divide="ignore", invalid="ignore"):
        if fam == NEGBIN:
            r, p = spec.r, spec.p
            out = (gammaln(r + kk) - gammaln(r) - gammaln(kk + 1.0)
                   + r * np.log(p) + kk * np.log1p(-p))
        elif fam == POISSON:
            lam = spec.lam
            out = xlogy(kk, lam) - lam - gammaln(kk + 1.0)
        elif fam == CMP:
            logz = _cmp_log_z(spec.lam, spec.nu, spec.tol)
            out = kk * np.log(spec.lam) - spec.nu * gammaln(kk + 1.0) - logz
        elif fam == BINOMIAL:
            n, p = spec.n, spec.p
            valid = valid & (k <= n)
            kk = np.where(valid, kk, 0.0)
            out = (gammaln(n + 1.0) - gammaln(kk + 1.0) - gammaln(n - kk + 1.0)
                   + xlogy(kk, p) + xlog1py(n - kk, -np.asarray(p)))
        else:
            w = spec.weights
            valid = valid & (k < len(w))
            idx = np.where(valid, kk, 0.0).astype(int)
            out = np.log(w[idx])
    return np.where(valid, out, -np.inf)


def count_pmf(spec: CountDistSpec, k):
    return np.exp(count_logpmf(spec, k))


def count_support_max(spec: CountDistSpec, tol: float = 1e-12, max_terms: int = MAX_TERMS) -> int:
    """Smallest ``K`` with ``P(X <= K) >= 1 - tol``, maximised over array parameters."""
    if spec.finite_support:
        return spec.support_end
    col = spec.column()
    start = 0
    acc = None
    while start < max_terms:
        k = np.arange(start, start + _CHUNK, dtype=float)
        logp = np.atleast_2d(count_logpmf(col, k))
        head = logp[:, :1] if acc is None else np.logaddexp(acc, logp[:, :1])
        cum = np.logaddexp.accumulate(np.concatenate([head, logp[:, 1:]], axis=1), axis=1)
        reached = cum >= math.log1p(-tol)
        if np.all(reached.any(axis=1)):
            return int(start + reached.argmax(axis=1).max())
        acc = cum[:, -1:]
        start += _CHUNK
    raise TruncationError(
        f"{spec.family}: cumulative mass below 1 - {tol} after {max_terms} terms",
        mass=float(np.exp(acc).min()),
    )


def count_cdf(spec: CountDistSpec, k):
    """``P(X <= k)`` for real ``k`` (floored), vectorised over ``k``."""
    k = np.floor(np.asarray(k, dtype=float))
    top = np.max(k) if k.size else -1
    if spec.finite_support:
        top = min(top, spec.support_end)
    if top < 0:
        return np.zeros(np.shape(k))
    if top + 1 > MAX_TERMS:
        raise TruncationError(f"count_cdf grid exceeds {MAX_TERMS} terms", mass=None)
    grid = np.arange(top + 1, dtype=float)
    col = spec.column()
    logp = np.atleast_2d(count_logpmf(col, grid))
    cum = np.minimum(np.exp(np.logaddexp.accumulate(logp, axis=1)), 1.0)
    idx = np.clip(k, -1, top).astype(int)
    if cum.shape[0] == 1:
        return np.where(idx < 0, 0.0, cum[0, np.maximum(idx, 0)])
    rows = np.arange(cum.shape[0])
    return np.where(idx < 0, 0.0, cum[rows, np.maximum(idx, 0)])


def count_mean(spec: CountDistSpec):
    fam = spec.family
    if fam == NEGBIN:
        return spec.r * (1.0 - spec.p) / spec.p
    if fam == POISSON:
        return spec.lam
    if fam == BINOMIAL:
        return spec.n * spec.p
    if fam == MULTINOMIAL:
        return float(np.dot(np.arange(len(spec.weights)), spec.weights))
    return _series_moment(spec, 1)


def count_var(spec: CountDistSpec):
    fam = spec.family
    if fam == NEGBIN:
        return spec.r * (1.0 - spec.p) / np.square(spec.p)
    if fam == POISSON:
        return spec.lam
    if fam == BINOMIAL:
        return spec.n * spec.p * (1.0 - spec.p)
    mean = count_mean(spec)
    if fam == MULTINOMIAL:
        k = np.arange(len(spec.weights))
        return float(np.dot(k * k, spec.weights) - mean * mean)
    return _series_moment(spec, 2) - np.square(mean)


def _series_moment(spec, order):
    kmax = count_support_max(spec, tol=min(spec.tol, 1e-14))
    k = np.arange(kmax + 1, dtype=float)
    p = np.atleast_2d(np.exp(count_logpmf(spec.column(), k)))
    out = (p * k**order).sum(axis=1)
    return float(out[0]) if out.size == 1 and np.ndim(spec.lam) == 0 else out


def count_sample(spec: CountDistSpec, n: int, rng=None):
    """Draw ``n`` integers from ``spec`` (array parameters must have length ``n``)."""
    rng = np.random.default_rng(rng)
    fam = spec.family
    if fam == NEGBIN:
        return rng.negative_binomial(spec.r, spec.p, size=n)
    if fam == POISSON:
        return rng.poisson(spec.lam, size=n)
    if fam == BINOMIAL:
        return rng.binomial(spec.n, spec.p, size=n)
    if fam == MULTINOMIAL:
        return rng.choice(len(spec.weights), size=n, p=spec.weights)
    # CMP: inverse CDF on a table long enough that the left-out tail is < 1e-15
    u = rng.random(n)
    lam_a, nu_a = np.broadcast_arrays(np.asarray(spec.lam, float), np.asarray(spec.nu, float))
    if lam_a.ndim == 0:
        lam_a, nu_a = np.full(n, float(lam_a)), np.full(n, float(nu_a))
    out = np.empty(n, dtype=np.int64)
    pairs, inverse = np.unique(np.stack([lam_a, nu_a], axis=1), axis=0, return_inverse=True)
    inverse = inverse.ravel()
    for i, (lam, nu) in enumerate(pairs):
        sub = CountDistSpec.cmp(lam, nu, spec.tol)
        kmax = count_support_max(sub, tol=1e-15)
        cum = np.cumsum(count_pmf(sub, np.arange(kmax + 1)))
        mask = inverse == i
        out[mask] = np.minimum(np.searchsorted(cum, u[mask] * cum[-1], side="right"), kmax)
    return out
