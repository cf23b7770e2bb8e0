"""Estimation of the length-of-stay mixture (MLE, EM, 2d-EM)."""

from .config import FitConfig, FitResult, MultiStart, QuantileSplit, UserSupplied
from .em import em2d_e_step, em2d_m_step, em_e_step, em_m_step
from .fitting import fit, fit_em, fit_em2d, fit_mle
from .init import Initialization, initialize, quantile_split
from .params import Layout

__all__ = [
    "FitConfig",
    "FitResult",
    "Initialization",
    "Layout",
    "MultiStart",
    "QuantileSplit",
    "UserSupplied",
    "em2d_e_step",
    "em2d_m_step",
    "em_e_step",
    "em_m_step",
    "fit",
    "fit_em",
    "fit_em2d",
    "fit_mle",
    "initialize",
    "quantile_split",
]
