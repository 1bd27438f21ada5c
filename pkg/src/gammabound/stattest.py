"""The level-alpha test of H0: the observational study's confounding is at most gamma."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .bounds import (
    ArmQuantiles,
    CateNuisance,
    _arm_arrays,
    adversarial_outcome,
    cate_bound_learner,
    hajek_arm,
    qb_arm_bounds,
    tau_level,
    transport_cate_bounds,
    zsb_arm_bounds,
)
from .core import AteEstimate, Dataset, RngSpec, SensitivityInterval, Target, as_gamma
from .errors import DomainError, EmptyDataset
from .nuisance import CrossFitPlan, CrossFitter, NuisanceSpec, fit_regressor

VERSION = "1"

# Acklam's rational approximation coefficients
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / (
            (((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0)
    q = p - 0.5
    r = q * q
    return (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / (
        ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0)


def normal_quantile(p: float) -> float:
    """Inverse standard-normal CDF: rational approximation plus one Halley refinement."""
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability {p} outside (0, 1)")
    if p > 0.5:
        return -normal_quantile(1.0 - p)
    if p == 0.5:
        return 0.0
    x = _acklam(p)
    err = ndtr(x) - p
    u = err * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return float(x - u / (1.0 + 0.5 * x * u))


# ---------------------------------------------------------------------------


def rct_ate(d_rct: Dataset, pi: float | None = None, w: np.ndarray | None = None, target: Target = Target.RCT) -> AteEstimate:
    """Weighted Horvitz-Thompson ATE from a trial with known assignment probability."""
    if d_rct.n == 0:
        raise EmptyDataset("trial dataset is empty")
    pi = d_rct.pi if pi is None else pi
    if pi is None or not 0.0 < pi < 1.0:
        raise ValueError("trial assignment probability must lie in (0, 1)")
    w = np.ones(d_rct.n) if w is None else np.asarray(w, float)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    t = d_rct.t
    terms = d_rct.y * (t / pi - (1 - t) / (1.0 - pi)) * w
    n = d_rct.n
    se = float(np.std(terms, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return AteEstimate(float(terms.mean()), se, Target(target))


def make_bags(n: int, n_bs: int, rng: RngSpec) -> np.ndarray:
    """Bootstrap resamples as an (n_bs, n) matrix of multiplicities."""
    gen = rng.generator()
    bags = np.empty((n_bs, n), dtype=np.int64)
    for b in range(n_bs):
        bags[b] = np.bincount(gen.integers(0, n, size=n), minlength=n)
    bags.flags.writeable = False
    return bags


def bootstrap_se(statistic, n: int, n_bs: int, rng: RngSpec) -> float:
    """SD across resamples of ``statistic(freq)``, where ``freq`` holds multiplicities."""
    vals = [statistic(f) for f in make_bags(n, n_bs, rng)]
    return float(np.std(vals, ddof=1))


# ---------------------------------------------------------------------------


ESTIMATORS = ("qb", "zsb", "cate_learner")


@dataclass(frozen=True)
class TestConfig:
    alpha: float = 0.05
    target: Target = Target.OBS_RESTRICTED
    n_bs: int = 100
    rng: RngSpec = field(default_factory=lambda: RngSpec(0))
    estimator: str = "qb"
    one_sided: bool = False
    nuisance: NuisanceSpec = field(default_factory=NuisanceSpec)

    __test__ = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        object.__setattr__(self, "target", Target(self.target))
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if self.target is Target.RCT and self.estimator != "cate_learner":
            raise ValueError("the trial-population target needs the cate_learner estimator")
        if self.target is Target.OBS_RESTRICTED and self.estimator == "cate_learner":
            raise ValueError("the restricted observational target uses qb or zsb")
        if self.target is Target.OBS_RESTRICTED and self.n_bs < 2:
            raise ValueError("bootstrap SEs need n_bs >= 2")


@dataclass(frozen=True)
class TestResult:
    gamma: float
    stat_plus: float
    stat_minus: float
    threshold: float
    reject: bool
    ate: AteEstimate
    interval: SensitivityInterval
    estimator: str = "qb"

    __test__ = False

    def to_json(self) -> dict:
        return {
            "version": VERSION,
            "gamma": self.gamma,
            "stat_plus": _num(self.stat_plus),
            "stat_minus": _num(self.stat_minus),
            "threshold": self.threshold,
            "reject": self.reject,
            "mu_hat": self.ate.value,
            "se_mu": self.ate.se,
            "bound_lower": self.interval.lower,
            "bound_upper": self.interval.upper,
            "se_lower": self.interval.se_lower,
            "se_upper": self.interval.se_upper,
            "target": self.ate.target.value,
            "estimator": self.estimator,
        }


def _num(v: float):
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def standardized(diff: float, scale: float) -> float:
    if scale > 0:
        return diff / scale
    if diff == 0:
        return 0.0
    return math.copysign(math.inf, diff)


def standardized_statistics(ate: AteEstimate, interval: SensitivityInterval, target: Target) -> tuple[float, float]:
    """(T+, T-): standardized distances of the trial estimate inside the interval."""
    s = ate.se
    if Target(target) is Target.RCT:
        sp = math.sqrt(interval.se_upper**2 + s**2 + 2 * interval.se_upper * s)
        sm = math.sqrt(interval.se_lower**2 + s**2 + 2 * interval.se_lower * s)
    else:
        sp = math.sqrt(interval.se_upper**2 + s**2)
        sm = math.sqrt(interval.se_lower**2 + s**2)
    return standardized(interval.upper - ate.value, sp), standardized(ate.value - interval.lower, sm)


def decide(stat_plus: float, stat_minus: float, alpha: float, one_sided: bool = False) -> tuple[bool, float]:
    z = normal_quantile(alpha / 2.0)
    if one_sided:
        return bool(stat_plus < z), z
    return bool(min(stat_plus, stat_minus) < z), z


class Session:
    """One observational/trial pair with nuisances and bootstrap bags shared across gamma.

    For the restricted observational target ``d_obs`` must already be
    restricted to the trial support and ``rct_weights`` carries w(X) per
    trial record (ones when the covariate laws agree).
    """

    def __init__(
        self,
        d_rct: Dataset | None,
        d_obs: Dataset,
        cfg: TestConfig,
        rct_weights: np.ndarray | None = None,
        e_hat: np.ndarray | None = None,
    ):
        self.d_rct = d_rct
        self.d_obs = d_obs
        self.cfg = cfg
        self.ate = None if d_rct is None else rct_ate(d_rct, w=rct_weights, target=cfg.target)
        plan = CrossFitPlan.make(d_obs.n, cfg.nuisance.folds, cfg.rng.child("crossfit"))
        self.fitter = CrossFitter(d_obs, plan, cfg.nuisance)
        self._e_hat = e_hat
        self._bags = None
        self._intervals: dict[float, SensitivityInterval] = {}
        self._starts: dict[tuple[int, int], np.ndarray] = {}

    @property
    def e_hat(self) -> np.ndarray:
        if self._e_hat is None:
            self._e_hat = self.fitter.propensity()
        return self._e_hat

    @property
    def bags(self) -> np.ndarray:
        if self._bags is None:
            self._bags = make_bags(self.d_obs.n, self.cfg.n_bs, self.cfg.rng.child("bootstrap"))
        return self._bags

    def interval(self, gamma: float) -> SensitivityInterval:
        gamma = as_gamma(gamma)
        if gamma not in self._intervals:
            if self.cfg.estimator == "cate_learner":
                self._intervals[gamma] = self._cate_interval(gamma)
            else:
                self._intervals[gamma] = self._ate_interval(gamma)
        return self._intervals[gamma]

    def point_interval(self, gamma: float) -> SensitivityInterval:
        """Point bounds without bootstrap SEs."""
        gamma = as_gamma(gamma)
        if gamma in self._intervals:
            return self._intervals[gamma]
        if self.cfg.estimator == "cate_learner":
            return self.interval(gamma)
        quant = self._quantiles(gamma) if self.cfg.estimator == "qb" and gamma > 1.0 else None
        return SensitivityInterval(gamma, *self._ate_point(gamma, quant))

    def test(self, gamma: float) -> TestResult:
        iv = self.interval(gamma)
        sp, sm = standardized_statistics(self.ate, iv, self.cfg.target)
        reject, z = decide(sp, sm, self.cfg.alpha, self.cfg.one_sided)
        return TestResult(iv.gamma, sp, sm, z, bool(reject), self.ate, iv, self.cfg.estimator)

    # -- restricted observational target -----------------------------------

    def _quantiles(self, gamma: float) -> dict[int, ArmQuantiles]:
        tau = tau_level(gamma)
        out = {}
        for arm in (0, 1):
            lo, hi = self.fitter.quantile_pair(arm, tau)
            out[arm] = ArmQuantiles(hi, lo)
        return out

    def _arm_point(self, arm, gamma, quant, freq, warm):
        sel, y, p, f = _arm_arrays(self.d_obs.y, self.d_obs.t, self.e_hat, arm, freq)
        if self.cfg.estimator == "zsb":
            return zsb_arm_bounds(y, p, gamma, f)
        if quant is None:
            h = hajek_arm(y, p, f)
            return h, h
        qa = ArmQuantiles(quant[arm].upper[sel], quant[arm].lower[sel])
        starts = (self._starts.get((arm, 0)), self._starts.get((arm, 1))) if warm else (None, None)
        lo, hi, c_lo, c_hi = qb_arm_bounds(y, p, qa, gamma, f, starts)
        if not warm:
            if c_lo is not None:
                self._starts[(arm, 0)] = c_lo
            if c_hi is not None:
                self._starts[(arm, 1)] = c_hi
        return lo, hi

    def _ate_point(self, gamma, quant, freq=None, warm=False) -> tuple[float, float]:
        lo1, hi1 = self._arm_point(1, gamma, quant, freq, warm)
        lo0, hi0 = self._arm_point(0, gamma, quant, freq, warm)
        return lo1 - hi0, hi1 - lo0

    def _ate_interval(self, gamma: float) -> SensitivityInterval:
        quant = self._quantiles(gamma) if self.cfg.estimator == "qb" and gamma > 1.0 else None
        lower, upper = self._ate_point(gamma, quant)
        reps = np.array([self._ate_point(gamma, quant, f, warm=True) for f in self.bags])
        se_lo, se_hi = np.std(reps, axis=0, ddof=1)
        return SensitivityInterval(gamma, lower, upper, float(se_lo), float(se_hi))

    # -- trial-population target --------------------------------------------

    def cate_nuisance(self, gamma: float) -> CateNuisance:
        tau = tau_level(gamma)
        d = self.d_obs
        cols = {}
        for arm in (0, 1):
            q_lo, q_hi = self.fitter.quantile_pair(arm, tau)
            cols[f"q{arm}_upper"], cols[f"q{arm}_lower"] = q_hi, q_lo
            for direction, q in (("upper", q_hi), ("lower", q_lo)):
                r = adversarial_outcome(d.y, q, gamma, direction)
                rho = np.empty(d.n)
                for train, held in self.fitter.splits:
                    tr = train[d.t[train] == arm]
                    model = fit_regressor(d.x[tr], r[tr], self.cfg.nuisance.regressor, self.cfg.nuisance.knn_k)
                    rho[held] = model.predict(d.x[held])
                cols[f"rho{arm}_{direction}"] = rho
        return CateNuisance(e_hat=self.e_hat, **cols)

    def _cate_interval(self, gamma: float) -> SensitivityInterval:
        nuis = self.cate_nuisance(gamma)
        spec = self.cfg.nuisance
        upper = cate_bound_learner(self.d_obs, nuis, gamma, "upper", spec.regressor, spec.knn_k)
        lower = cate_bound_learner(self.d_obs, nuis, gamma, "lower", spec.regressor, spec.knn_k)
        return transport_cate_bounds((lower, upper), self.d_rct)


def bootstrap_interval_se(
    d_obs: Dataset,
    gamma: float,
    estimator: str,
    n_bs: int,
    rng: RngSpec,
    nuisance: NuisanceSpec | None = None,
) -> SensitivityInterval:
    """Point bounds plus bootstrap SEs on a restricted observational dataset."""
    if n_bs < 2:
        raise ValueError("bootstrap SEs need n_bs >= 2")
    cfg = TestConfig(n_bs=n_bs, rng=rng, estimator=estimator, nuisance=nuisance or NuisanceSpec())
    return Session(None, d_obs, cfg).interval(gamma)


def run_test(
    d_rct: Dataset,
    d_obs: Dataset,
    gamma: float,
    cfg: TestConfig,
    rct_weights: np.ndarray | None = None,
) -> TestResult:
    return Session(d_rct, d_obs, cfg, rct_weights).test(gamma)
