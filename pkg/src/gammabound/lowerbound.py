"""Grid-search lower bound on the confounding strength, the critical value of a
sensitivity analysis, flagging rules and the population-level oracle."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Dataset, RngSpec, as_gamma
from .stattest import VERSION, Session, TestConfig, TestResult
from .synthetic import RCT_RANGE, SyntheticPopulation


@dataclass(frozen=True)
class GammaGrid:
    step: float = 0.05
    max: float = 20.0
    start: float = 1.0

    def __post_init__(self):
        if self.start != 1.0:
            raise ValueError("the grid starts at 1")
        if not self.step > 0:
            raise ValueError("grid step must be positive")
        if self.max < self.start:
            raise ValueError("grid max must be >= 1")

    def points(self) -> np.ndarray:
        k = int(math.floor((self.max - self.start) / self.step + 1e-9))
        return np.round(self.start + self.step * np.arange(k + 1), 12)

    def to_json(self) -> dict:
        return {"start": self.start, "step": self.step, "max": self.max}


@dataclass(frozen=True)
class TraceEntry:
    gamma: float
    reject: bool
    result: TestResult | None = None

    def to_json(self) -> dict:
        if self.result is not None:
            return self.result.to_json()
        return {"gamma": self.gamma, "reject": self.reject}


@dataclass
class LowerBoundResult:
    """``None`` in ``gamma_lb`` / ``gamma_ct`` means nothing was found up to ``grid.max``."""

    gamma_lb: float | None
    grid: GammaGrid
    trace: list[TraceEntry] = field(default_factory=list)
    gamma_ct: float | None = None
    psi_sens: int | None = None
    psi_bin: int | None = None

    @property
    def last_rejected(self) -> float | None:
        rej = [e.gamma for e in self.trace if e.reject]
        return max(rej) if rej else None

    def to_json(self) -> dict:
        out = {
            "version": VERSION,
            "gamma_lb": self.gamma_lb,
            "gamma_ct": self.gamma_ct,
            "psi_sens": self.psi_sens,
            "psi_bin": self.psi_bin,
            "grid": self.grid.to_json(),
            "last_rejected": self.last_rejected,
            "trace": [e.to_json() for e in self.trace],
        }
        if self.gamma_lb is None or (self.psi_sens is not None and self.gamma_ct is None):
            out["searched_max"] = self.grid.max
        return out


TestFn = Callable[[float], "TestResult | bool"]


def _as_entry(gamma: float, outcome) -> TraceEntry:
    if isinstance(outcome, TestResult):
        return TraceEntry(gamma, outcome.reject, outcome)
    return TraceEntry(gamma, bool(outcome))


def walk_grid(test: TestFn, grid: GammaGrid, full_trace: bool = False) -> LowerBoundResult:
    """Smallest grid point whose test accepts; ``test`` returns a TestResult or a reject flag."""
    trace = []
    found = None
    for g in grid.points():
        entry = _as_entry(float(g), test(float(g)))
        trace.append(entry)
        if not entry.reject and found is None:
            found = float(g)
            if not full_trace:
                break
    return LowerBoundResult(found, grid, trace)


def gamma_lower_bound(
    d_rct: Dataset | None,
    d_obs: Dataset | None,
    grid: GammaGrid = GammaGrid(),
    cfg: TestConfig | None = None,
    rct_weights: np.ndarray | None = None,
    test: TestFn | None = None,
    full_trace: bool = False,
    session: Session | None = None,
) -> LowerBoundResult:
    """Walk the grid upward from 1, sharing nuisances and bootstrap bags across gamma.

    ``test`` replaces the statistical test (useful for injected decision rules).
    """
    if test is None:
        if session is None:
            session = Session(d_rct, d_obs, cfg or TestConfig(), rct_weights)
        test = session.test
    return walk_grid(test, grid, full_trace)


def critical_value(
    d_obs: Dataset,
    grid: GammaGrid = GammaGrid(),
    estimator: str = "qb",
    cfg: TestConfig | None = None,
    session: Session | None = None,
) -> float | None:
    """Smallest grid gamma whose point sensitivity interval contains zero."""
    if session is None:
        base = cfg or TestConfig()
        cfg = TestConfig(alpha=base.alpha, n_bs=max(base.n_bs, 2), rng=base.rng,
                         estimator=estimator, nuisance=base.nuisance)
        session = Session(None, d_obs, cfg)
    for g in grid.points():
        if session.point_interval(float(g)).contains(0.0):
            return float(g)
    return None


def flag_decisions(gamma_lb: float | None, gamma_ct: float | None) -> tuple[int, int]:
    """(psi_sens, psi_bin).

    An unresolved lower bound counts as confounding beyond the searched range;
    an unresolved critical value means the conclusion never flips in range.
    """
    if gamma_lb is None:
        return 1, 1
    psi_bin = int(gamma_lb > 1.0)
    if gamma_ct is None:
        return 0, psi_bin
    return int(gamma_lb > gamma_ct), psi_bin


# ---------------------------------------------------------------------------
# population oracle


def infinite_sample_lower_bound(
    population: SyntheticPopulation,
    mc_n: int = 1_000_000,
    rng: RngSpec = RngSpec(0, "oracle"),
    tol: float = 1e-3,
    gamma_max: float = 100.0,
    x_range: float = RCT_RANGE,
) -> float | None:
    """Population lower bound: smallest gamma whose sharp interval covers the true effect.

    Bounds are Monte Carlo averages with common random numbers across gamma.
    If the true effect already sits within three MC standard errors of the
    unconfounded point, 1.0 is returned.  ``None`` if no root below ``gamma_max``.
    """
    draws = population.draw(mc_n, rng, x_range)

    def gap(gamma: float, side: str) -> tuple[float, float]:
        lower, upper = population.bound_terms(draws, gamma, x_range)
        v = upper if side == "upper" else lower
        return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))

    m, se = gap(1.0, "upper")
    if abs(m) <= 3.0 * se:
        return 1.0
    # interval below the truth: the upper bound must rise to meet it
    side, sign = ("upper", -1.0) if m < 0 else ("lower", 1.0)
    lo, hi = 1.0, 2.0
    while sign * gap(hi, side)[0] > 0:
        lo, hi = hi, hi * 2.0
        if hi > gamma_max:
            return None
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if sign * gap(mid, side)[0] > 0:
            lo = mid
        else:
            hi = mid
    return as_gamma(0.5 * (lo + hi))
