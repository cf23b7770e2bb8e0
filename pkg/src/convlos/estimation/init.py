"""Starting points for the estimators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..distributions import BINOMIAL, CMP, LOGNORMAL, MULTINOMIAL, NEGBIN, POISSON
from ..links import ParameterMap, link_inverse
from ..mixture import MixtureModel, check_observations
from .config import InitStrategy, MultiStart, QuantileSplit, UserSupplied
from .params import Layout

_MIN_SIGMA = 0.05


@dataclass(frozen=True)
class Initialization:
    model: MixtureModel
    warning: Optional[str] = None


def _lognormal_moments(y):
    logs = np.log(y)
    return float(logs.mean()), float(max(logs.std(), _MIN_SIGMA))


def _long_moments(y, template):
    """Method-of-moments guess for the long component.

    The continuous location sits at the low end of the long stays (lag zero)
    with a scale taken from the residual spread; the count law takes the
    excess mean and whatever variance the continuous part does not explain.
    """
    q10 = float(np.quantile(y, 0.1))
    spread = float(y.std()) if y.size > 1 else 1.0
    sigma = max(0.2, 0.3 * spread)
    if template.long.cont.family == LOGNORMAL:
        s_log = 0.3
        location = np.log(max(q10, 1e-3)) - 0.5 * s_log**2
        cont = {"m": float(location), "sigma": s_log}
        cont_mean = max(q10, 1e-3)
        cont_var = (np.exp(s_log**2) - 1.0) * cont_mean**2
    else:
        cont = {"m": q10, "sigma": sigma}
        cont_mean, cont_var = q10, sigma**2
    mean_k = max(0.1, float(y.mean()) - cont_mean)
    var_k = max(float(y.var()) - cont_var, 1.1 * mean_k)
    count = template.long.count
    values = dict(cont)
    if count.family == NEGBIN:
        p = min(max(mean_k / var_k, 0.02), 0.98)
        values.update(r=max(mean_k * p / (1.0 - p), 0.05), p=p)
    elif count.family == POISSON:
        values["lambda"] = mean_k
    elif count.family == CMP:
        values.update({"lambda": mean_k, "nu": 1.0})
    elif count.family == BINOMIAL:
        values["p"] = min(max(mean_k / max(count.n, 1), 0.02), 0.98) if count.n else 0.5
    elif count.family == MULTINOMIAL:
        size = len(count.weights)
        lags = np.clip(np.floor(y - cont_mean + 0.5), 0, size - 1).astype(int)
        hist = np.bincount(lags, minlength=size) + 1.0
        values["weights"] = hist / hist.sum()
    return values


def quantile_split(y, template: MixtureModel, threshold_days: float = 1.0, fixed=()) -> Initialization:
    """Seed the short component with stays below the threshold, the long one with the rest."""
    y = check_observations(y)
    short_y, long_y = y[y < threshold_days], y[y >= threshold_days]
    warning = None
    if short_y.size < 2 or long_y.size < 2:
        warning = (f"quantile split at {threshold_days} days left a side with "
                   f"{min(short_y.size, long_y.size)} observations; using global moments")
        short_y = short_y if short_y.size >= 2 else y
        long_y = long_y if long_y.size >= 2 else y
        pi = 0.5
    else:
        pi = long_y.size / y.size
    mu_s, sigma_s = _lognormal_moments(short_y)
    values = {"pi": min(max(pi, 0.02), 0.98), "mu_S": mu_s, "sigma_S": sigma_s}
    values.update(_long_moments(long_y, template))
    values = {k: v for k, v in values.items() if k not in fixed}
    model = template.with_values(values)
    maps = {}
    for target, pmap in template.parameter_maps.items():
        if target in fixed or target not in values:
            continue
        beta = np.zeros(pmap.beta.size)
        beta[0] = float(link_inverse(pmap.link, values[target]))
        maps[target] = pmap.with_beta(beta)
    return Initialization(model.with_maps(maps), warning)


def initialize(y, template: MixtureModel, strategy: InitStrategy, start: int = 0, seed: int = 0,
               fixed=()) -> Initialization:
    """Starting model number ``start`` for ``strategy``.

    MultiStart start 0 is the plain quantile split; later starts jitter every
    free coordinate on the link scale with a generator seeded by ``(seed, start)``.
    """
    if isinstance(strategy, UserSupplied):
        return Initialization(strategy.model)
    if isinstance(strategy, QuantileSplit):
        return quantile_split(y, template, strategy.threshold_days, fixed)
    if not isinstance(strategy, MultiStart):
        raise TypeError(f"unknown init strategy {strategy!r}")
    base = quantile_split(y, template, strategy.threshold_days, fixed)
    if start == 0:
        return base
    layout = Layout(base.model, fixed)
    rng = np.random.default_rng([seed, start])
    theta = layout.pack(base.model)
    theta = theta + rng.normal(0.0, strategy.jitter, size=theta.size)
    return Initialization(layout.unpack(theta), base.warning)
