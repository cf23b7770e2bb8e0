"""Goodness of fit: empirical CDF, Kolmogorov distance and one-family baselines."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import digamma, gammainc, ndtr

from .errors import DataDomainError, DegenerateFitError, ModelValidityError
from .links import DesignMatrix
from .mixture import MixtureModel, check_observations, mix_cdf

BASELINE_FAMILIES = ("lognormal", "gamma", "weibull")
ROOT_TOL = 1e-10
# slack allowed for round-off when checking that a CDF is monotone
_MONOTONE_SLACK = 1e-9


@dataclass(frozen=True)
class EcdfView:
    sorted_values: np.ndarray
    n: int

    @classmethod
    def from_data(cls, data) -> "EcdfView":
        values = np.sort(np.asarray(data, dtype=float).ravel())
        if values.size == 0:
            raise DataDomainError("an empirical CDF needs at least one observation")
        if not np.isfinite(values).all():
            raise DataDomainError("observations must be finite")
        values.setflags(write=False)
        return cls(values, int(values.size))

    def __call__(self, x):
        """Right-continuous step function; ties jump by their multiplicity."""
        return np.searchsorted(self.sorted_values, x, side="right") / self.n


def kolmogorov_distance(ecdf: EcdfView, model_cdf: Callable) -> float:
    """``sup_x |F_n(x) - F(x)|`` for a continuous model CDF.

    The supremum of a step function against a continuous CDF is reached just
    before or at a jump, so both one-sided gaps at the sorted points suffice.
    """
    x = ecdf.sorted_values
    F = np.asarray(model_cdf(x), dtype=float).reshape(x.shape)
    if not np.isfinite(F).all():
        raise ModelValidityError("model CDF returned non-finite values")
    if (F < -_MONOTONE_SLACK).any() or (F > 1 + _MONOTONE_SLACK).any():
        raise ModelValidityError("model CDF left [0, 1]")
    if (np.diff(F) < -_MONOTONE_SLACK).any():
        raise ModelValidityError("model CDF is not monotone on the sample points")
    F = np.clip(F, 0.0, 1.0)
    i = np.arange(1, ecdf.n + 1)
    upper = np.abs(F - i / ecdf.n)
    lower = np.abs(F - (i - 1) / ecdf.n)
    return float(min(1.0, max(upper.max(), lower.max())))


# --------------------------------------------------------------------------- #
# Baselines
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class BaselineSpec:
    """A fitted single-family law.

    ``params`` are ``(mu, sigma)`` of log y for the log-normal,
    ``(shape, rate)`` for the gamma and ``(shape, scale)`` for the Weibull.
    """

    family: str
    params: tuple[float, float]

    def __post_init__(self):
        if self.family not in BASELINE_FAMILIES:
            raise ValueError(f"unknown baseline family {self.family!r}")
        a, b = self.params
        ok = b > 0 and math.isfinite(a) if self.family == "lognormal" else a > 0 and b > 0
        if not (ok and math.isfinite(b)):
            raise ValueError(f"invalid {self.family} parameters {self.params}")

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        a, b = self.params
        pos = np.where(x > 0, x, 1.0)
        if self.family == "lognormal":
            out = ndtr((np.log(pos) - a) / b)
        elif self.family == "gamma":
            out = gammainc(a, b * pos)
        else:
            out = -np.expm1(-np.power(pos / b, a))
        return np.where(x > 0, out, 0.0)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        a, b = self.params
        if self.family == "lognormal":
            z = (np.log(x) - a) / b
            return -0.5 * z * z - np.log(x * b) - 0.5 * math.log(2 * math.pi)
        if self.family == "gamma":
            return a * math.log(b) + (a - 1) * np.log(x) - b * x - math.lgamma(a)
        return math.log(a / b) + (a - 1) * np.log(x / b) - np.power(x / b, a)

    def to_dict(self) -> dict:
        return {"family": self.family, "params": [float(p) for p in self.params]}


def _bracket_root(fun, lo=1e-3, hi=10.0):
    while fun(lo) * fun(hi) > 0:
        lo, hi = lo / 10.0, hi * 10.0
        if hi > 1e12:
            raise DegenerateFitError("could not bracket the shape parameter")
    return brentq(fun, lo, hi, xtol=ROOT_TOL, rtol=4 * np.finfo(float).eps, maxiter=500)


def fit_baseline(data, family: str) -> BaselineSpec:
    """Maximum likelihood fit of a two-parameter positive law."""
    y = check_observations(data)
    if family not in BASELINE_FAMILIES:
        raise ValueError(f"unknown baseline family {family!r}; expected one of {BASELINE_FAMILIES}")
    if y.size < 2 or np.ptp(y) == 0:
        raise DegenerateFitError("baseline fit needs at least two distinct observations")
    logy = np.log(y)
    if family == "lognormal":
        return BaselineSpec(family, (float(logy.mean()), float(logy.std())))
    if family == "gamma":
        # profile equation log(a) - digamma(a) = log(mean) - mean(log y)
        s = math.log(y.mean()) - logy.mean()
        shape = _bracket_root(lambda a: math.log(a) - digamma(a) - s)
        return BaselineSpec(family, (shape, shape / float(y.mean())))
    z = y / y.max()
    logz = np.log(z)

    def score(k):
        w = np.power(z, k)
        return float(w @ logz / w.sum()) - 1.0 / k - float(logz.mean())

    shape = _bracket_root(score)
    scale = float(y.max() * np.mean(np.power(z, shape)) ** (1.0 / shape))
    return BaselineSpec(family, (shape, scale))


# --------------------------------------------------------------------------- #
# Comparison tables
# --------------------------------------------------------------------------- #


def marginal_cdf(model: MixtureModel, matrix: Optional[DesignMatrix] = None) -> Callable:
    """Population CDF of ``model``: the average of per-record CDFs over ``matrix``.

    Identical design rows are grouped so discrete covariates stay cheap.
    """
    if matrix is None or not model.has_covariates:
        return lambda x: mix_cdf(model, x)
    rows, counts = np.unique(matrix.values, axis=0, return_counts=True)
    weights = counts / counts.sum()
    groups = [DesignMatrix(row[None, :], matrix.column_names) for row in rows]

    def cdf(x):
        x = np.asarray(x, dtype=float)
        total = np.zeros_like(x)
        for w, g in zip(weights, groups):
            total += w * mix_cdf(model.resolve(g, 1), x)
        return total

    return cdf


@dataclass(frozen=True)
class GofRow:
    label: str
    n: int
    distance: float


class GofTable(list):
    """Rows of ``(label, n, distance)`` sorted by distance."""

    COLUMNS = ("label", "n", "distance")

    def to_records(self) -> list[dict]:
        return [{"label": r.label, "n": r.n, "distance": r.distance} for r in self]

    def to_json(self) -> str:
        return json.dumps(self.to_records(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.COLUMNS)
        for r in self:
            writer.writerow([r.label, r.n, repr(r.distance)])
        return buf.getvalue()

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "GofTable":
        return cls(GofRow(str(r["label"]), int(r["n"]), float(r["distance"])) for r in records)

    def distance(self, label: str) -> float:
        for r in self:
            if r.label == label:
                return r.distance
        raise KeyError(label)


def compare(data, fitted_models: Sequence[tuple[str, Callable]]) -> GofTable:
    ecdf = EcdfView.from_data(data)
    rows = [GofRow(label, ecdf.n, kolmogorov_distance(ecdf, cdf)) for label, cdf in fitted_models]
    # stable sort keeps the caller's order among ties
    return GofTable(sorted(rows, key=lambda r: r.distance))


def baseline_models(data, families: Sequence[str] = BASELINE_FAMILIES) -> list[tuple[str, Callable]]:
    """Fit each baseline family and return ``(label, cdf)`` pairs for :func:`compare`."""
    return [(family, fit_baseline(data, family).cdf) for family in families]
