"""Fit configuration and fit results."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np

from ..errors import ConfigError
from ..mixture import MixtureModel, model_to_dict

METHODS = ("MLE", "EM", "EM2D")
OPTIMIZERS = ("QuasiNewtonFD", "NelderMead")
ACCELERATIONS = ("squarem", "none")


@dataclass(frozen=True)
class QuantileSplit:
    """Stays shorter than ``threshold_days`` seed the short component."""

    threshold_days: float = 1.0


@dataclass(frozen=True)
class UserSupplied:
    model: MixtureModel


@dataclass(frozen=True)
class MultiStart:
    """``k`` starts: the plain quantile split, then ``k - 1`` jittered copies."""

    k: int = 4
    threshold_days: float = 1.0
    jitter: float = 0.3


InitStrategy = Union[QuantileSplit, UserSupplied, MultiStart]


@dataclass(frozen=True)
class FitConfig:
    method: str = "EM"
    max_iters: int = 500
    loglik_tol: float = 1e-6
    param_tol: float = 1e-6
    optimizer: str = "QuasiNewtonFD"
    init: InitStrategy = field(default_factory=QuantileSplit)
    seed: int = 0
    fixed: tuple[str, ...] = ()
    acceleration: str = "squarem"

    def __post_init__(self):
        if self.acceleration not in ACCELERATIONS:
            raise ConfigError(f"acceleration must be one of {ACCELERATIONS}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if not (self.loglik_tol > 0 and self.param_tol > 0):
            raise ConfigError("tolerances must be > 0")
        if isinstance(self.init, MultiStart) and self.init.k < 1:
            raise ConfigError("MultiStart needs k >= 1")
        object.__setattr__(self, "fixed", tuple(self.fixed))

    def to_dict(self) -> dict:
        init = self.init
        if isinstance(init, QuantileSplit):
            init_d: dict[str, Any] = {"strategy": "QuantileSplit", "threshold_days": init.threshold_days}
        elif isinstance(init, MultiStart):
            init_d = {"strategy": "MultiStart", "k": init.k, "threshold_days": init.threshold_days,
                      "jitter": init.jitter}
        else:
            init_d = {"strategy": "UserSupplied", "model": model_to_dict(init.model)}
        return {"method": self.method, "max_iters": self.max_iters, "loglik_tol": self.loglik_tol,
                "param_tol": self.param_tol, "optimizer": self.optimizer, "init": init_d,
                "seed": self.seed, "fixed": list(self.fixed), "acceleration": self.acceleration}

    @classmethod
    def from_dict(cls, data: dict, model: Optional[MixtureModel] = None) -> "FitConfig":
        data = dict(data or {})
        init_d = dict(data.pop("init", {}) or {})
        strategy = init_d.pop("strategy", "QuantileSplit")
        if strategy == "QuantileSplit":
            init: InitStrategy = QuantileSplit(float(init_d.get("threshold_days", 1.0)))
        elif strategy == "MultiStart":
            init = MultiStart(int(init_d.get("k", 4)), float(init_d.get("threshold_days", 1.0)),
                              float(init_d.get("jitter", 0.3)))
        elif strategy == "UserSupplied":
            if model is None:
                raise ConfigError("UserSupplied initialisation needs a model")
            init = UserSupplied(model)
        else:
            raise ConfigError(f"unknown init strategy {strategy!r}")
        known = {"method", "max_iters", "loglik_tol", "param_tol", "optimizer", "seed", "fixed",
                 "acceleration"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown fit options {sorted(unknown)}")
        if "fixed" in data:
            data["fixed"] = tuple(data["fixed"] or ())
        return cls(init=init, **data)


@dataclass
class FitResult:
    """Outcome of one fit (best restart).

    ``responsibilities[:, 1]`` is the posterior probability of a long stay;
    ``count_posterior[i, j]`` is ``P(K = count_support[j] | y_i, long)``.
    """

    theta_hat: MixtureModel
    loglik: float
    loglik_trace: list[float]
    converged: bool
    reason: str
    method: str
    seed: int
    n_restarts_used: int = 1
    responsibilities: Optional[np.ndarray] = None
    count_posterior: Optional[np.ndarray] = None
    count_support: Optional[np.ndarray] = None
    iterations: int = 0
    flagged_iterations: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    restart_logliks: list[float] = field(default_factory=list)
    elapsed_seconds: float = 0.0

    def to_dict(self, include_posteriors: bool = False) -> dict:
        out = {
            "method": self.method,
            "model": model_to_dict(self.theta_hat),
            "loglik": self.loglik,
            "loglik_trace": list(self.loglik_trace),
            "converged": self.converged,
            "reason": self.reason,
            "iterations": self.iterations,
            "seed": self.seed,
            "n_restarts_used": self.n_restarts_used,
            # a skipped restart has no likelihood
            "restart_logliks": [v if np.isfinite(v) else None for v in self.restart_logliks],
            "flagged_iterations": list(self.flagged_iterations),
            "warnings": list(self.warnings),
        }
        if include_posteriors and self.responsibilities is not None:
            out["responsibilities"] = self.responsibilities.tolist()
        return out
