"""Partial-identification estimators under the marginal sensitivity model.

Every per-arm routine works on the records of one arm with ``p`` the
probability of landing in that arm (``e`` for treated, ``1 - e`` for
control).  Inverse propensities of the full model then range over
``[1 + o / gamma, 1 + gamma * o]`` with ``o = (1 - p) / p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .core import Dataset, SensitivityInterval, as_gamma
from .errors import EmptyArm, EmptyTarget, LpInfeasible, MissingNuisance
from .nuisance import Regressor, fit_regressor
from .quantreg import quantile_regression


@dataclass(frozen=True)
class NominalBounds:
    ell: np.ndarray | float
    u: np.ndarray | float


def nominal_bounds(e, gamma: float) -> NominalBounds:
    """Range of full propensities whose odds differ from those of ``e`` by at most ``gamma``."""
    gamma = as_gamma(gamma)
    e = np.asarray(e, dtype=float)
    ell = e / (e + (1.0 - e) * gamma)
    u = e / (e + (1.0 - e) / gamma)
    if ell.ndim == 0:
        return NominalBounds(float(ell), float(u))
    return NominalBounds(ell, u)


def tau_level(gamma: float) -> float:
    gamma = as_gamma(gamma)
    return gamma / (gamma + 1.0)


def _arm_arrays(y, t, e_hat, arm, freq=None):
    sel = np.asarray(t) == arm
    if freq is not None:
        sel &= np.asarray(freq) > 0
    if not sel.any():
        raise EmptyArm(f"no records in arm {arm}")
    p = np.asarray(e_hat, float)[sel]
    if arm == 0:
        p = 1.0 - p
    f = np.ones(int(sel.sum())) if freq is None else np.asarray(freq, float)[sel]
    return sel, np.asarray(y, float)[sel], p, f


def hajek_arm(y: np.ndarray, p: np.ndarray, freq: np.ndarray | None = None) -> float:
    w = 1.0 / p if freq is None else freq / p
    return float(np.dot(w, y) / np.sum(w))


def ipw_hajek(d: Dataset, e_hat: np.ndarray, arm: int) -> float:
    """Normalized inverse-propensity mean of the outcome within ``arm``."""
    _, y, p, _ = _arm_arrays(d.y, d.t, e_hat, arm)
    return hajek_arm(y, p)


def ipw_contrast(d: Dataset, e_hat: np.ndarray) -> float:
    return ipw_hajek(d, e_hat, 1) - ipw_hajek(d, e_hat, 0)


# ---------------------------------------------------------------------------
# ZSB


def zsb_arm_upper(y: np.ndarray, p: np.ndarray, gamma: float, freq: np.ndarray | None = None) -> float:
    """Largest weighted mean of ``y`` over inverse propensities in the MSM box.

    The optimal weights put the upper box edge on every outcome above a
    threshold and the lower edge below it, so a scan over the sorted
    outcomes finds the optimum exactly.
    """
    gamma = as_gamma(gamma)
    f = np.ones_like(y) if freq is None else freq
    o = (1.0 - p) / p
    lo = f * (1.0 + o / gamma)
    hi = f * (1.0 + gamma * o)
    order = np.argsort(-y, kind="stable")
    ys, lo, hi = y[order], lo[order], hi[order]
    # k records at the upper edge, k = 0..m
    num = np.concatenate([[0.0], np.cumsum(hi * ys)]) + np.concatenate([np.cumsum((lo * ys)[::-1])[::-1], [0.0]])
    den = np.concatenate([[0.0], np.cumsum(hi)]) + np.concatenate([np.cumsum(lo[::-1])[::-1], [0.0]])
    return float(np.max(num / den))


def zsb_arm_bounds(y, p, gamma, freq=None) -> tuple[float, float]:
    return -zsb_arm_upper(-y, p, gamma, freq), zsb_arm_upper(y, p, gamma, freq)


def zsb_arm_upper_lp(y: np.ndarray, p: np.ndarray, gamma: float) -> float:
    """Charnes-Cooper linear program for the same maximum (dense reference solver).

    Variables are ``(a_1..a_m, t)`` with ``a_i = t / e_i - t``; the
    objective ``sum y_i o_i a_i' + t sum y_i`` is written in the scaled
    variables ``a_i' = a_i / o_i`` so that ``t / gamma <= a_i' <= t * gamma``.
    """
    gamma = as_gamma(gamma)
    m = len(y)
    o = (1.0 - p) / p
    c = -np.concatenate([y * o, [y.sum()]])
    A_eq = np.concatenate([o, [float(m)]])[None, :]
    A_ub = np.zeros((2 * m, m + 1))
    A_ub[:m, :m] = np.eye(m)
    A_ub[:m, m] = -gamma
    A_ub[m:, :m] = -np.eye(m)
    A_ub[m:, m] = 1.0 / gamma
    res = optimize.linprog(
        c, A_ub=A_ub, b_ub=np.zeros(2 * m), A_eq=A_eq, b_eq=[1.0],
        bounds=[(None, None)] * m + [(0, None)], method="highs",
    )
    if res.status != 0:
        raise LpInfeasible(res.message)
    return float(-res.fun)


def zsb_arm_vertex(y: np.ndarray, p: np.ndarray, gamma: float) -> tuple[float, float]:
    """Exhaustive enumeration of all box vertices (exponential; small ``m`` only)."""
    gamma = as_gamma(gamma)
    m = len(y)
    o = (1.0 - p) / p
    lo, hi = 1.0 + o / gamma, 1.0 + gamma * o
    best_lo, best_hi = np.inf, -np.inf
    for mask in range(1 << m):
        pick = np.array([(mask >> i) & 1 for i in range(m)], dtype=bool)
        w = np.where(pick, hi, lo)
        v = float(np.dot(w, y) / w.sum())
        best_lo, best_hi = min(best_lo, v), max(best_hi, v)
    return best_lo, best_hi


def zsb_interval(d: Dataset, e_hat: np.ndarray, gamma: float, freq: np.ndarray | None = None) -> SensitivityInterval:
    """ZSB interval for the ATE: upper = arm-1 upper - arm-0 lower and vice versa."""
    arms = []
    for arm in (1, 0):
        _, y, p, f = _arm_arrays(d.y, d.t, e_hat, arm, freq)
        arms.append(zsb_arm_bounds(y, p, gamma, f))
    (lo1, hi1), (lo0, hi0) = arms
    return SensitivityInterval(as_gamma(gamma), lo1 - hi0, hi1 - lo0)


# ---------------------------------------------------------------------------
# QB


def _basis(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, float)
    if np.ptp(q) <= 1e-12 * max(1.0, float(np.max(np.abs(q)))):
        return np.ones((len(q), 1))
    return np.column_stack([np.ones_like(q), q])


def qb_arm_upper(
    y: np.ndarray,
    p: np.ndarray,
    q: np.ndarray,
    gamma: float,
    freq: np.ndarray | None = None,
    start: np.ndarray | None = None,
) -> tuple[float, np.ndarray | None]:
    """Quantile-balancing upper bound on one arm's mean; returns (bound, coefficients).

    ``q`` is the fitted upper conditional quantile at level ``gamma / (gamma + 1)``.
    A constant ``q`` degenerates the basis to the intercept alone.
    """
    gamma = as_gamma(gamma)
    f = np.ones_like(y) if freq is None else freq
    if gamma == 1.0:
        return hajek_arm(y, p, f), None
    tau = tau_level(gamma)
    o = (1.0 - p) / p
    G = _basis(q)
    if start is not None and len(start) != G.shape[1]:
        start = None
    coef = quantile_regression(G, y, tau, f * o, start=start)
    fit = G @ coef
    r = y - fit
    power = np.where(r >= 0, gamma, 1.0 / gamma)
    num = np.dot(f, r * (1.0 + power * o)) + np.dot(f, fit / p)
    return float(num / np.dot(f, 1.0 / p)), coef


@dataclass(frozen=True)
class ArmQuantiles:
    """Per-record fitted conditional quantiles of one arm's outcome at ``tau`` and ``1 - tau``."""

    upper: np.ndarray
    lower: np.ndarray


def qb_arm_bounds(y, p, quant: ArmQuantiles, gamma, freq=None, starts=(None, None)):
    """(lower, upper, coef_lower, coef_upper) for one arm."""
    hi, c_hi = qb_arm_upper(y, p, quant.upper, gamma, freq, starts[1])
    neg, c_lo = qb_arm_upper(-y, p, -quant.lower, gamma, freq, starts[0])
    return -neg, hi, c_lo, c_hi


def qb_interval(
    d: Dataset,
    e_hat: np.ndarray,
    quantiles: dict[int, ArmQuantiles],
    gamma: float,
    freq: np.ndarray | None = None,
) -> SensitivityInterval:
    """QB interval for the ATE.

    ``quantiles[arm]`` carries per-record arrays over the whole dataset
    (only that arm's entries are read).
    """
    res = {}
    for arm in (1, 0):
        if arm not in quantiles:
            raise MissingNuisance(f"quantiles for arm {arm} are missing")
        sel, y, p, f = _arm_arrays(d.y, d.t, e_hat, arm, freq)
        qa = ArmQuantiles(quantiles[arm].upper[sel], quantiles[arm].lower[sel])
        lo, hi, _, _ = qb_arm_bounds(y, p, qa, gamma, f)
        res[arm] = (lo, hi)
    lower = res[1][0] - res[0][1]
    upper = res[1][1] - res[0][0]
    return SensitivityInterval(as_gamma(gamma), lower, upper)


# ---------------------------------------------------------------------------
# pseudo-outcome CATE bounds


def cvar_upper(y, q, tau):
    """H_+: upper-tail conditional value at risk integrand."""
    return q + np.maximum(y - q, 0.0) / (1.0 - tau)


def cvar_lower(y, q, tau):
    return q - np.maximum(q - y, 0.0) / (1.0 - tau)


def adversarial_outcome(y, q, gamma, direction: str):
    """R_+ (``direction='upper'``, ``q`` at level tau) or R_- (``q`` at level 1 - tau)."""
    gamma = as_gamma(gamma)
    tau = tau_level(gamma)
    h = cvar_upper(y, q, tau) if direction == "upper" else cvar_lower(y, q, tau)
    return y / gamma + (1.0 - 1.0 / gamma) * h


def pseudo_outcome(t, y, e_arm, rho_hat, r_value):
    """Doubly-robust bound pseudo-outcome for one arm.

    ``t`` is the arm indicator, ``e_arm`` the probability of that arm,
    ``rho_hat`` the fitted counterfactual regression and ``r_value`` the
    adversarial outcome (only read where ``t == 1``).
    """
    t = np.asarray(t, float)
    r = np.where(t == 1, r_value, 0.0)
    return t * y + (1.0 - t) * rho_hat + (1.0 - e_arm) * t / e_arm * (r - rho_hat)


@dataclass(frozen=True)
class CateBoundModel:
    direction: str
    gamma: float
    regression: Regressor

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.regression.predict(x)


@dataclass(frozen=True)
class CateNuisance:
    """Cross-fitted inputs for the bound learner, one entry per record."""

    e_hat: np.ndarray
    q1_upper: np.ndarray  # arm 1, level tau
    q1_lower: np.ndarray  # arm 1, level 1 - tau
    q0_upper: np.ndarray
    q0_lower: np.ndarray
    rho1_upper: np.ndarray
    rho1_lower: np.ndarray
    rho0_upper: np.ndarray
    rho0_lower: np.ndarray


def cate_pseudo_outcomes(d: Dataset, nuis: CateNuisance, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-outcomes for the upper and lower CATE bound (arm-1 bound minus opposite arm-0 bound)."""
    t1 = d.t.astype(float)
    t0 = 1.0 - t1
    e1, e0 = nuis.e_hat, 1.0 - nuis.e_hat
    phi1_up = pseudo_outcome(t1, d.y, e1, nuis.rho1_upper, adversarial_outcome(d.y, nuis.q1_upper, gamma, "upper"))
    phi1_lo = pseudo_outcome(t1, d.y, e1, nuis.rho1_lower, adversarial_outcome(d.y, nuis.q1_lower, gamma, "lower"))
    phi0_up = pseudo_outcome(t0, d.y, e0, nuis.rho0_upper, adversarial_outcome(d.y, nuis.q0_upper, gamma, "upper"))
    phi0_lo = pseudo_outcome(t0, d.y, e0, nuis.rho0_lower, adversarial_outcome(d.y, nuis.q0_lower, gamma, "lower"))
    return phi1_up - phi0_lo, phi1_lo - phi0_up


def cate_bound_learner(
    d: Dataset,
    nuis: CateNuisance | None,
    gamma: float,
    direction: str,
    regressor: str = "linear",
    knn_k: int = 50,
) -> CateBoundModel:
    if nuis is None:
        raise MissingNuisance("the bound learner needs propensity, quantile and counterfactual fits")
    if direction not in ("upper", "lower"):
        raise ValueError("direction must be 'upper' or 'lower'")
    up, lo = cate_pseudo_outcomes(d, nuis, gamma)
    target = up if direction == "upper" else lo
    return CateBoundModel(direction, as_gamma(gamma), fit_regressor(d.x, target, regressor, knn_k))


def transport_cate_bounds(models: tuple[CateBoundModel, CateBoundModel], target: Dataset | np.ndarray) -> SensitivityInterval:
    """Average the (lower, upper) bound functions over target covariates.

    SEs are sample SDs of the evaluations over sqrt(n); a single record gets SE 0.
    """
    lower_model, upper_model = models
    x = target.x if isinstance(target, Dataset) else np.asarray(target, float)
    n = len(x)
    if n == 0:
        raise EmptyTarget("no target records to transport the bounds to")
    lo_vals = lower_model.predict(x)
    hi_vals = upper_model.predict(x)

    def se(v):
        return float(np.std(v, ddof=1) / np.sqrt(n)) if n > 1 else 0.0

    lo, hi = float(lo_vals.mean()), float(hi_vals.mean())
    # independent final-stage fits can cross on small samples
    return SensitivityInterval(lower_model.gamma, min(lo, hi), max(lo, hi), se(lo_vals), se(hi_vals))
