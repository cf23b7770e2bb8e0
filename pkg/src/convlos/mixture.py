"""Two-class length-of-stay mixture: log-normal short stays, convolutive long stays.

``pi`` is always the probability of a LONG stay, so the density is
``(1 - pi) * f_short(y) + pi * f_long(y)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

from .convolution import (
    ConvolutiveLongStay,
    conv_cdf,
    conv_logpdf,
    conv_mean,
    conv_sample,
)
from .distributions import (
    BINOMIAL,
    CMP,
    LOGNORMAL,
    MULTINOMIAL,
    NEGBIN,
    POISSON,
    ContDistSpec,
    CountDistSpec,
    cont_cdf,
    cont_logpdf,
    cont_mean,
    cont_sample,
)
from .errors import ConfigError, DataDomainError, ParameterDomainError
from .links import DesignMatrix, ParameterMap, apply

FORMAT_VERSION = 1

COUNT_TARGETS = {
    NEGBIN: ("r", "p"),
    POISSON: ("lambda",),
    CMP: ("lambda", "nu"),
    BINOMIAL: ("p",),
    MULTINOMIAL: (),
}
_COUNT_FIELD = {"r": "r", "p": "p", "lambda": "lam", "nu": "nu"}


@dataclass(frozen=True)
class LosSample:
    """One observed stay: length in days plus its raw feature record."""

    y: float
    features: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not (math.isfinite(self.y) and self.y > 0):
            raise DataDomainError(f"length of stay must be positive and finite, got {self.y}")


@dataclass(frozen=True)
class MixtureModel:
    pi: float
    short: ContDistSpec
    long: ConvolutiveLongStay
    parameter_maps: Mapping[str, ParameterMap] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.pi <= 1.0):
            raise ParameterDomainError(f"pi must lie in [0, 1], got {self.pi}")
        if self.short.family != LOGNORMAL:
            raise ParameterDomainError("the short-stay component must be log-normal")
        allowed = set(self.targets())
        for name, pmap in self.parameter_maps.items():
            if name != pmap.target:
                raise ConfigError(f"parameter map stored under {name!r} targets {pmap.target!r}")
            if name not in allowed:
                raise ConfigError(f"{name!r} is not a parameter of this model ({sorted(allowed)})")
            if name == "pi" and not pmap.is_constant:
                raise ConfigError("the long-stay probability pi cannot depend on covariates")
        object.__setattr__(self, "parameter_maps", dict(self.parameter_maps))

    # -- parameter access --------------------------------------------------- #

    def targets(self) -> tuple[str, ...]:
        """Scalar parameters of this model, in a fixed order."""
        return ("pi", "mu_S", "sigma_S") + COUNT_TARGETS[self.long.count.family] + ("m", "sigma")

    def value(self, target: str) -> float:
        """Baseline scalar value of ``target`` (ignores covariate maps)."""
        if target == "pi":
            return self.pi
        if target == "mu_S":
            return self.short.mu
        if target == "sigma_S":
            return self.short.sigma
        if target == "m":
            return self.long.cont.mu
        if target == "sigma":
            return self.long.cont.sigma
        return getattr(self.long.count, _COUNT_FIELD[target])

    def with_values(self, values: Mapping[str, Any]) -> "MixtureModel":
        """Copy with scalar parameters (or ``weights``) replaced."""
        pi = values.get("pi", self.pi)
        short = ContDistSpec(self.short.family, values.get("mu_S", self.short.mu),
                             values.get("sigma_S", self.short.sigma))
        cont = ContDistSpec(self.long.cont.family, values.get("m", self.long.cont.mu),
                            values.get("sigma", self.long.cont.sigma))
        count = self.long.count
        kw = {_COUNT_FIELD[t]: values[t] for t in COUNT_TARGETS[count.family] if t in values}
        if "weights" in values:
            kw["weights"] = values["weights"]
        if kw:
            count = replace(count, **kw)
        long = ConvolutiveLongStay(count, cont, self.long.trunc_tol)
        return MixtureModel(float(pi), short, long, self.parameter_maps)

    def with_maps(self, maps: Mapping[str, ParameterMap]) -> "MixtureModel":
        merged = dict(self.parameter_maps)
        merged.update(maps)
        return replace(self, parameter_maps=merged)

    @property
    def has_covariates(self) -> bool:
        return any(not m.is_constant for m in self.parameter_maps.values())

    def resolve(self, matrix: Optional[DesignMatrix] = None, n: Optional[int] = None) -> "MixtureModel":
        """Model whose covariate-dependent fields hold one value per row."""
        if not self.parameter_maps:
            return self
        values = {}
        for target, pmap in self.parameter_maps.items():
            vals = apply(pmap, matrix, n)
            values[target] = float(vals[0]) if pmap.is_constant else vals
        return replace(self.with_values(values), parameter_maps={})


# --------------------------------------------------------------------------- #
# Density, likelihood, CDF, mean, sampling
# --------------------------------------------------------------------------- #


def _log_weight(p):
    with np.errstate(divide="ignore"):
        return math.log(p) if p > 0 else -math.inf


def component_logpdfs(model: MixtureModel, y, matrix: Optional[DesignMatrix] = None):
    """Weighted component log-densities ``(log((1-pi) f_S), log(pi f_L))``."""
    y = np.asarray(y, dtype=float)
    resolved = model.resolve(matrix, y.size)
    log_short = _log_weight(1.0 - resolved.pi) + cont_logpdf(resolved.short, y)
    if resolved.pi > 0:
        log_long = _log_weight(resolved.pi) + conv_logpdf(resolved.long, y)
    else:
        log_long = np.full(y.shape, -np.inf)
    if resolved.pi == 1.0:
        log_short = np.full(y.shape, -np.inf)
    return log_short, log_long


def mix_logpdf(model: MixtureModel, y, matrix: Optional[DesignMatrix] = None):
    log_short, log_long = component_logpdfs(model, y, matrix)
    return np.logaddexp(log_short, log_long)


def mix_pdf(model: MixtureModel, y, matrix: Optional[DesignMatrix] = None):
    """Mixture density at ``y`` with covariate-resolved parameters per row."""
    return np.exp(mix_logpdf(model, y, matrix))


def check_observations(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    bad = ~(np.isfinite(y) & (y > 0))
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise DataDomainError(f"row {row}: length of stay must be positive and finite, got {y[row]}",
                              row=row)
    return y


def mix_loglik(model: MixtureModel, y, matrix: Optional[DesignMatrix] = None) -> float:
    """Observed-data log-likelihood, summed exactly so row order is irrelevant."""
    y = check_observations(y)
    return math.fsum(mix_logpdf(model, y, matrix).tolist())


def samples_to_arrays(samples, schema=None):
    """Split ``LosSample`` records into ``(y, design matrix or None)``."""
    from .links import encode

    y = check_observations([s.y for s in samples])
    if schema is None:
        return y, None
    return y, encode([s.features for s in samples], schema)


def mix_cdf(model: MixtureModel, y, matrix: Optional[DesignMatrix] = None):
    y = np.asarray(y, dtype=float)
    resolved = model.resolve(matrix, y.size)
    out = (1.0 - resolved.pi) * cont_cdf(resolved.short, y)
    if resolved.pi > 0:
        out = out + resolved.pi * conv_cdf(resolved.long, y)
    return out


def mix_mean(model: MixtureModel, matrix: Optional[DesignMatrix] = None, n: Optional[int] = None):
    resolved = model.resolve(matrix, n)
    return (1.0 - resolved.pi) * cont_mean(resolved.short) + resolved.pi * conv_mean(resolved.long)


def mix_sample(model: MixtureModel, n: int, rng=None, matrix: Optional[DesignMatrix] = None):
    """Draw ``n`` stays; returns ``(y, is_long)``.

    Each draw picks the long component with probability ``pi`` and then draws
    from that component; with covariates ``matrix`` must have ``n`` rows.
    """
    rng = np.random.default_rng(rng)
    resolved = model.resolve(matrix, n)
    is_long = rng.random(n) < resolved.pi
    short = cont_sample(resolved.short, n, rng)
    long = conv_sample(resolved.long, n, rng)
    return np.where(is_long, long, short), is_long


# --------------------------------------------------------------------------- #
# JSON
# --------------------------------------------------------------------------- #


def _num(value):
    if isinstance(value, np.ndarray):
        raise ConfigError("cannot serialise a model with row-wise parameter arrays")
    return float(value)


def count_to_dict(count: CountDistSpec) -> dict:
    out: dict[str, Any] = {"family": count.family}
    if count.family == BINOMIAL:
        out["n"] = count.n
    if count.family == MULTINOMIAL:
        out["weights"] = [float(w) for w in count.weights]
    for target in COUNT_TARGETS[count.family]:
        out[target] = _num(getattr(count, _COUNT_FIELD[target]))
    if count.family == CMP:
        out["tol"] = count.tol
    return out


def count_from_dict(data: Mapping[str, Any]) -> CountDistSpec:
    fam = data["family"]
    if fam == NEGBIN:
        return CountDistSpec.negbin(data["r"], data["p"])
    if fam == POISSON:
        return CountDistSpec.poisson(data["lambda"])
    if fam == CMP:
        return CountDistSpec.cmp(data["lambda"], data["nu"], float(data.get("tol", 1e-12)))
    if fam == BINOMIAL:
        return CountDistSpec.binomial(data["n"], data["p"])
    if fam == MULTINOMIAL:
        return CountDistSpec.multinomial(data["weights"])
    raise ConfigError(f"unknown count family {fam!r}")


def model_to_dict(model: MixtureModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "pi": _num(model.pi),
        "short": {"family": model.short.family, "mu": _num(model.short.mu),
                  "sigma": _num(model.short.sigma)},
        "long": {
            "count": count_to_dict(model.long.count),
            "cont": {"family": model.long.cont.family, "mu": _num(model.long.cont.mu),
                     "sigma": _num(model.long.cont.sigma)},
            "trunc_tol": model.long.trunc_tol,
        },
        "parameter_maps": {
            name: {"beta": [float(b) for b in pmap.beta],
                   "columns": list(pmap.selected_columns), "link": pmap.link}
            for name, pmap in sorted(model.parameter_maps.items())
        },
    }


def model_from_dict(data: Mapping[str, Any]) -> MixtureModel:
    if "model" in data and "pi" not in data:
        data = data["model"]
    version = data.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported model format_version {version}")
    try:
        short = ContDistSpec(data["short"].get("family", LOGNORMAL), data["short"]["mu"],
                             data["short"]["sigma"])
        long_d = data["long"]
        cont = ContDistSpec(long_d["cont"]["family"], long_d["cont"]["mu"], long_d["cont"]["sigma"])
        long = ConvolutiveLongStay(count_from_dict(long_d["count"]), cont,
                                   float(long_d.get("trunc_tol", 1e-10)))
        maps = {
            name: ParameterMap(name, spec["beta"], tuple(spec.get("columns", ())), spec.get("link"))
            for name, spec in (data.get("parameter_maps") or {}).items()
        }
        return MixtureModel(float(data["pi"]), short, long, maps)
    except KeyError as exc:
        raise ConfigError(f"model document missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ParameterDomainError):
            raise
        raise ConfigError(f"invalid model document: {exc}") from None


def save_model(model: MixtureModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n", encoding="utf-8")


def load_model(path) -> MixtureModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
