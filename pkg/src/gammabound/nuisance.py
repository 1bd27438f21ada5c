"""Nuisance models: propensity scores, conditional quantiles, outcome
regressions, and K-fold cross-fitting."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit

from .core import Dataset, RngSpec
from .errors import (
    FoldDegenerate,
    NoConvergence,
    NonBinaryOutcome,
    SingleArm,
    TooFewRecords,
)
from .quantreg import quantile_regression, weighted_quantile

PROPENSITY_CLIP = 1e-3
DEFAULT_LAMBDA = 1e-6


def _design(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    x = x.reshape(len(x), -1)
    return np.column_stack([np.ones(len(x)), x])


# ---------------------------------------------------------------------------
# logistic regression


def logistic_objective(beta: np.ndarray, X: np.ndarray, t: np.ndarray, lam: float) -> float:
    """Mean negative log-likelihood plus a ridge penalty on the slopes.

    ``X`` includes the intercept column, which is not penalized.
    """
    eta = X @ beta
    nll = np.mean(np.logaddexp(0.0, eta) - t * eta)
    return float(nll + 0.5 * lam * np.dot(beta[1:], beta[1:]))


def logistic_gradient(beta: np.ndarray, X: np.ndarray, t: np.ndarray, lam: float) -> np.ndarray:
    p = expit(X @ beta)
    g = X.T @ (p - t) / len(t)
    g[1:] += lam * beta[1:]
    return g


def fit_logistic(
    X: np.ndarray,
    t: np.ndarray,
    lam: float = DEFAULT_LAMBDA,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> np.ndarray:
    """Damped Newton-Raphson for the ridge-penalized logistic MLE.

    Convergence requires both a small gradient and a small Newton step; on
    separable data with ``lam=0`` the gradient vanishes while the
    coefficients keep running off, which must not count as converged.
    """
    t = np.asarray(t, dtype=float)
    n, p = X.shape
    beta = np.zeros(p)
    pen = np.full(p, lam)
    pen[0] = 0.0
    obj = logistic_objective(beta, X, t, lam)
    grad = logistic_gradient(beta, X, t, lam)
    for _ in range(max_iter):
        prob = expit(X @ beta)
        wts = prob * (1.0 - prob)
        H = (X * wts[:, None]).T @ X / n + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(step)):
            break
        s = 1.0
        while True:
            cand = beta - s * step
            cand_obj = logistic_objective(cand, X, t, lam)
            if cand_obj <= obj + 1e-4 * s * -np.dot(grad, step) or s < 1e-10:
                break
            s *= 0.5
        beta, obj = cand, cand_obj
        grad = logistic_gradient(beta, X, t, lam)
        step_norm = float(np.max(np.abs(s * step)))
        if np.max(np.abs(grad)) < tol and step_norm < 1e-6 * (1.0 + np.max(np.abs(beta))):
            return beta
    raise NoConvergence("logistic regression did not converge", float(np.max(np.abs(grad))))


@dataclass(frozen=True)
class PropensityModel:
    coefficients: np.ndarray
    lam: float = DEFAULT_LAMBDA

    def predict_raw(self, x: np.ndarray) -> np.ndarray:
        return expit(_design(x) @ self.coefficients)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.predict_raw(x), PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP)


def fit_propensity(d: Dataset, lam: float = DEFAULT_LAMBDA) -> PropensityModel:
    """Ridge-logistic model of P(T=1 | X)."""
    if d.n == 0 or np.all(d.t == d.t[0]):
        raise SingleArm("both treatment arms are needed to fit a propensity model")
    beta = fit_logistic(_design(d.x), d.t, lam)
    return PropensityModel(beta, lam)


# ---------------------------------------------------------------------------
# conditional quantiles


class QuantileKind(str, enum.Enum):
    LINEAR_PINBALL = "linear"
    BINARY_CLOSED_FORM = "binary"
    EMPIRICAL_KNN = "knn"


@dataclass(frozen=True)
class QuantileModel:
    """Fitted conditional tau-quantile of the outcome within one arm."""

    kind: QuantileKind
    tau: float
    coefficients: np.ndarray | None = None
    mean_model: PropensityModel | None = None
    knn_k: int = 0
    train_x: np.ndarray | None = None
    train_y: np.ndarray | None = None

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        if self.kind is QuantileKind.LINEAR_PINBALL:
            return _design(x) @ self.coefficients
        if self.kind is QuantileKind.BINARY_CLOSED_FORM:
            m = self.mean_model.predict_raw(x)
            return (self.tau > 1.0 - m).astype(float)
        return _knn_quantile(self.train_x, self.train_y, x, self.knn_k, self.tau)


def _knn_quantile(train_x, train_y, x, k, tau):
    k = min(k, len(train_y))
    if train_x.shape[1] == 0:
        nbr = np.broadcast_to(np.arange(k), (len(x), k))
    else:
        _, nbr = cKDTree(train_x).query(x, k=k)
        nbr = np.asarray(nbr).reshape(len(x), k)
    vals = np.sort(train_y[nbr], axis=1)
    # left-continuous inverse of the neighbourhood CDF
    j = max(int(math.ceil(tau * k - 1e-12)) - 1, 0)
    return vals[:, j]


def fit_quantile(
    d: Dataset,
    arm: int,
    tau: float,
    kind: QuantileKind | str = QuantileKind.LINEAR_PINBALL,
    knn_k: int = 50,
    lam: float = DEFAULT_LAMBDA,
) -> QuantileModel:
    if not 0.0 < tau < 1.0:
        raise ValueError("quantile level must lie in (0, 1)")
    kind = QuantileKind(kind)
    sel = d.t == arm
    x, y = d.x[sel], d.y[sel]
    if len(y) < max(10, d.d + 2):
        raise TooFewRecords(f"arm {arm} has {len(y)} records, need at least {max(10, d.d + 2)}")
    if kind is QuantileKind.LINEAR_PINBALL:
        G = _design(x)
        keep = _independent_columns(G)
        beta = np.zeros(G.shape[1])
        beta[keep] = quantile_regression(G[:, keep], y, tau)
        return QuantileModel(kind, tau, coefficients=beta)
    if kind is QuantileKind.BINARY_CLOSED_FORM:
        if not np.all(np.isin(y, (0.0, 1.0))):
            raise NonBinaryOutcome("closed-form quantiles need a 0/1 outcome")
        if np.all(y == y[0]):
            beta = np.zeros(d.d + 1)
            beta[0] = 50.0 if y[0] == 1 else -50.0
        else:
            beta = fit_logistic(_design(x), y, lam)
        return QuantileModel(kind, tau, mean_model=PropensityModel(beta, lam))
    return QuantileModel(kind, tau, knn_k=int(knn_k), train_x=x.copy(), train_y=y.copy())


def _independent_columns(G: np.ndarray) -> np.ndarray:
    """Indices of a maximal set of linearly independent columns (greedy, left to right)."""
    keep = []
    for j in range(G.shape[1]):
        cand = keep + [j]
        if np.linalg.matrix_rank(G[:, cand]) == len(cand):
            keep.append(j)
    return np.array(keep, dtype=int)


def rearrange(predictions: np.ndarray) -> np.ndarray:
    """Sort quantile predictions along the level axis (axis 0) for each point."""
    return np.sort(np.asarray(predictions), axis=0)


# ---------------------------------------------------------------------------
# outcome regressions (counterfactual CVaR regressions and final stages)


@dataclass(frozen=True)
class Regressor:
    kind: str
    coefficients: np.ndarray | None = None
    knn_k: int = 0
    train_x: np.ndarray | None = None
    train_y: np.ndarray | None = None

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(len(x), -1)
        if self.kind == "linear":
            return _design(x) @ self.coefficients
        k = min(self.knn_k, len(self.train_y))
        if x.shape[1] == 0:
            return np.full(len(x), self.train_y.mean())
        _, nbr = cKDTree(self.train_x).query(x, k=k)
        nbr = np.asarray(nbr).reshape(len(x), k)
        return self.train_y[nbr].mean(axis=1)


def fit_regressor(x: np.ndarray, y: np.ndarray, kind: str = "linear", knn_k: int = 50) -> Regressor:
    x = np.asarray(x, dtype=float).reshape(len(y), -1)
    if kind == "linear":
        beta, *_ = np.linalg.lstsq(_design(x), y, rcond=None)
        return Regressor("linear", coefficients=beta)
    if kind == "knn":
        return Regressor("knn", knn_k=int(knn_k), train_x=x.copy(), train_y=np.asarray(y, float).copy())
    raise ValueError(f"unknown regressor kind {kind!r}")


# ---------------------------------------------------------------------------
# cross-fitting


@dataclass(frozen=True)
class NuisanceSpec:
    propensity_lambda: float = DEFAULT_LAMBDA
    quantile_kind: QuantileKind = QuantileKind.LINEAR_PINBALL
    knn_k: int = 50
    folds: int = 5
    regressor: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "quantile_kind", QuantileKind(self.quantile_kind))
        if self.folds < 1:
            raise ValueError("folds must be >= 1")


@dataclass(frozen=True)
class CrossFitPlan:
    """Fold label per record; ``folds == 1`` means in-sample (no cross-fitting)."""

    folds: int
    assignment: np.ndarray
    rng: RngSpec | None = None

    @classmethod
    def make(cls, n: int, folds: int, rng: RngSpec) -> "CrossFitPlan":
        if folds < 1:
            raise ValueError("folds must be >= 1")
        if folds > n:
            raise ValueError(f"cannot split {n} records into {folds} folds")
        perm = rng.generator().permutation(n)
        assignment = np.empty(n, dtype=int)
        assignment[perm] = np.arange(n) % folds
        return cls(folds, assignment, rng)

    def splits(self):
        if self.folds == 1:
            everything = np.arange(len(self.assignment))
            yield everything, everything
            return
        for f in range(self.folds):
            held = np.flatnonzero(self.assignment == f)
            train = np.flatnonzero(self.assignment != f)
            yield train, held


@dataclass
class NuisanceTable:
    """Out-of-fold nuisance predictions, one entry per record."""

    e_hat: np.ndarray
    quantiles: dict[tuple[int, float], np.ndarray] = field(default_factory=dict)
    extras: dict[str, np.ndarray] = field(default_factory=dict)

    def quantile(self, arm: int, level: float) -> np.ndarray:
        return self.quantiles[(arm, round(level, 12))]


class CrossFitter:
    """Caches cross-fitted nuisances for one dataset and one fold plan.

    Quantile columns depend on the confounding strength through the level,
    so they are fitted lazily per level and memoised.
    """

    def __init__(self, d: Dataset, plan: CrossFitPlan, spec: NuisanceSpec):
        if len(plan.assignment) != d.n:
            raise ValueError("fold plan does not match dataset size")
        self.d = d
        self.plan = plan
        self.spec = spec
        self._splits = list(plan.splits())
        for train, _ in self._splits:
            arms = np.unique(d.t[train])
            if len(arms) < 2:
                raise FoldDegenerate("a training complement contains a single treatment arm")
        self._e_hat = None
        self._quantiles: dict[tuple[int, float], np.ndarray] = {}

    @property
    def splits(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return self._splits

    def propensity(self) -> np.ndarray:
        if self._e_hat is None:
            e = np.empty(self.d.n)
            for train, held in self._splits:
                model = fit_propensity(self.d.subset(train), self.spec.propensity_lambda)
                e[held] = model.predict(self.d.x[held])
            e.flags.writeable = False
            self._e_hat = e
        return self._e_hat

    def quantile_models(self, arm: int, level: float) -> list[QuantileModel]:
        return [
            fit_quantile(self.d.subset(train), arm, level, self.spec.quantile_kind, self.spec.knn_k,
                         self.spec.propensity_lambda)
            for train, _ in self._splits
        ]

    def quantile(self, arm: int, level: float) -> np.ndarray:
        key = (arm, round(level, 12))
        if key not in self._quantiles:
            q = np.empty(self.d.n)
            for (train, held), model in zip(self._splits, self.quantile_models(arm, level)):
                q[held] = model.predict(self.d.x[held])
            q.flags.writeable = False
            self._quantiles[key] = q
        return self._quantiles[key]

    def quantile_pair(self, arm: int, tau: float) -> tuple[np.ndarray, np.ndarray]:
        """(Q_{1-tau}, Q_tau) for one arm, rearranged so the lower never exceeds the upper."""
        lo = self.quantile(arm, 1.0 - tau)
        hi = self.quantile(arm, tau)
        if tau >= 0.5:
            return np.minimum(lo, hi), np.maximum(lo, hi)
        return np.maximum(lo, hi), np.minimum(lo, hi)


def cross_fit_predictions(
    d: Dataset,
    plan: CrossFitPlan,
    spec: NuisanceSpec,
    levels: tuple[float, ...] = (),
) -> NuisanceTable:
    """Out-of-fold propensity scores and per-arm quantiles at ``levels``."""
    cf = CrossFitter(d, plan, spec)
    table = NuisanceTable(e_hat=cf.propensity())
    for level in levels:
        for arm in (0, 1):
            table.quantiles[(arm, round(level, 12))] = cf.quantile(arm, level)
    return table


def weighted_median(v: np.ndarray, w: np.ndarray) -> float:
    return weighted_quantile(np.asarray(v, float), np.asarray(w, float), 0.5)
