"""Detect and lower-bound hidden confounding of an observational study using a randomized trial."""

from __future__ import annotations

from .bounds import ipw_hajek, nominal_bounds, qb_interval, tau_level, zsb_interval
from .core import (
    AteEstimate,
    Dataset,
    DatasetKind,
    RngSpec,
    SensitivityInterval,
    Target,
    UnitRecord,
    restrict_support,
    split_by_study,
    validate_dataset,
)
from .lowerbound import GammaGrid, LowerBoundResult, critical_value, flag_decisions, gamma_lower_bound
from .stattest import Session, TestConfig, TestResult, normal_quantile, rct_ate, run_test
from .synthetic import SyntheticSpec, generate

__version__ = "0.1.0"

__all__ = [
    "AteEstimate", "Dataset", "DatasetKind", "GammaGrid", "LowerBoundResult", "RngSpec",
    "SensitivityInterval", "Session", "SyntheticSpec", "Target", "TestConfig", "TestResult",
    "UnitRecord", "critical_value", "flag_decisions", "gamma_lower_bound", "generate",
    "ipw_hajek", "nominal_bounds", "normal_quantile", "qb_interval", "rct_ate",
    "restrict_support", "run_test", "split_by_study", "tau_level", "validate_dataset",
    "zsb_interval",
]
