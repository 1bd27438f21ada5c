"""Exact weighted linear quantile regression.

Two solvers share one contract -- return the exact minimiser of
``sum_i w_i * rho_tau(y_i - G_i @ beta)`` with ``rho_tau(r) = r * (tau - 1{r < 0})``:

* ``_fit_two`` handles the intercept-plus-one-regressor case by pivoting
  between elemental fits (lines through two data points).  Each pivot solves
  the one-dimensional rotation problem exactly with a weighted quantile, and
  the final vertex is certified through the subgradient optimality condition.
* ``_fit_lp`` solves the primal linear program with HiGHS.  It is used for
  wider bases and whenever the pivoting answer cannot be certified (heavy
  ties, e.g. binary outcomes).

The quantile-balancing bound needs the exact optimum: its closed form only
matches a feasible point of the constrained program at a true minimiser.
"""

from __future__ import annotations

import numpy as np
from scipy import optimize, sparse

_REL_TOL = 1e-10


def pinball_loss(r: np.ndarray, tau: float, w: np.ndarray | None = None) -> float:
    loss = r * (tau - (r < 0))
    return float(np.sum(loss if w is None else w * loss))


def weighted_quantile(v: np.ndarray, w: np.ndarray, tau: float) -> float:
    """Smallest ``v_j`` whose cumulative weight reaches ``tau`` of the total."""
    order = np.argsort(v, kind="stable")
    cw = np.cumsum(w[order])
    k = int(np.searchsorted(cw, tau * cw[-1] * (1 - 1e-15), side="left"))
    return float(v[order[min(k, len(v) - 1)]])


def quantile_regression(
    G: np.ndarray,
    y: np.ndarray,
    tau: float,
    w: np.ndarray | None = None,
    start: np.ndarray | None = None,
) -> np.ndarray:
    """Coefficients of the weighted tau-quantile regression of ``y`` on ``G``.

    ``G`` must carry the intercept column first.  Zero-weight rows are ignored.
    Collinear columns are not detected here; callers drop them beforehand.
    """
    y = np.asarray(y, dtype=float)
    G = np.asarray(G, dtype=float).reshape(len(y), -1)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=float)
    keep = w > 0
    if not keep.all():
        G, y, w = G[keep], y[keep], w[keep]
    if len(y) == 0:
        raise ValueError("quantile regression needs at least one positively weighted row")
    p = G.shape[1]
    if p == 1:
        return np.array([weighted_quantile(y, w, tau)])
    if p == 2:
        z = G[:, 1]
        beta = _fit_two(z, y, w, tau, None if start is None else float(start[1]))
        if beta is not None:
            return beta
    return _fit_lp(G, y, w, tau)


def _rotate(z, y, w, tau, k):
    """Best line through point ``k``; returns (slope, index of new basis point)."""
    b = z - z[k]
    a = y - y[k]
    moving = b != 0
    if not moving.any():
        return None, None
    idx = np.flatnonzero(moving)
    bb = b[idx]
    c = a[idx] / bb
    W = w[idx] * np.abs(bb)
    tau_i = np.where(bb > 0, tau, 1.0 - tau)
    target = float(np.dot(tau_i, W))
    order = np.argsort(c, kind="stable")
    cw = np.cumsum(W[order])
    j = int(np.searchsorted(cw, target * (1 - 1e-15), side="left"))
    j = min(j, len(order) - 1)
    return float(c[order[j]]), int(idx[order[j]])


def _fit_two(z, y, w, tau, slope0):
    if np.ptp(z) == 0:
        return None
    slope = 0.0 if slope0 is None or not np.isfinite(slope0) else slope0
    r0 = y - slope * z
    icpt = weighted_quantile(r0, w, tau)
    pivot = int(np.argmin(np.abs(r0 - icpt)))
    best = pinball_loss(y - icpt - slope * z, tau, w)
    scale = max(1.0, best)
    for _ in range(200):
        new_slope, new_point = _rotate(z, y, w, tau, pivot)
        if new_slope is None:
            return None
        new_icpt = y[pivot] - new_slope * z[pivot]
        loss = pinball_loss(y - new_icpt - new_slope * z, tau, w)
        if loss < best - _REL_TOL * scale:
            best, slope, icpt, pivot = loss, new_slope, new_icpt, new_point
            continue
        if loss <= best + _REL_TOL * scale:
            slope, icpt = new_slope, new_icpt
        break
    beta = np.array([icpt, slope])
    if _certify(np.column_stack([np.ones_like(z), z]), y, w, tau, beta):
        return beta
    return None


def _certify(G, y, w, tau, beta) -> bool:
    """Check the subgradient condition: 0 lies in the subdifferential at ``beta``."""
    r = y - G @ beta
    tol = 1e-9 * max(1.0, float(np.max(np.abs(y))))
    zero = np.abs(r) <= tol
    psi = np.where(r > 0, tau, tau - 1.0)
    psi[zero] = 0.0
    base = G.T @ (w * psi)
    Z = np.flatnonzero(zero)
    p = G.shape[1]
    if len(Z) == 0:
        return bool(np.all(np.abs(base) <= 1e-9 * max(1.0, float(np.sum(w)))))
    Gz = G[Z]
    lo = (tau - 1.0) * w[Z]
    hi = tau * w[Z]
    if len(Z) == p:
        try:
            lam = np.linalg.solve(Gz.T, -base)
        except np.linalg.LinAlgError:
            return False
        slack = 1e-9 * max(1.0, float(np.max(w[Z])))
        return bool(np.all(lam >= lo - slack) and np.all(lam <= hi + slack))
    res = optimize.linprog(
        np.zeros(len(Z)),
        A_eq=Gz.T,
        b_eq=-base,
        bounds=list(zip(lo, hi)),
        method="highs",
    )
    return bool(res.status == 0)


def _fit_lp(G, y, w, tau):
    n, p = G.shape
    c = np.concatenate([np.zeros(p), tau * w, (1.0 - tau) * w])
    eye = sparse.identity(n, format="csr")
    A = sparse.hstack([sparse.csr_matrix(G), eye, -eye], format="csr")
    bounds = [(None, None)] * p + [(0, None)] * (2 * n)
    res = optimize.linprog(c, A_eq=A, b_eq=y, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"quantile regression LP failed: {res.message}")
    beta = res.x[:p]
    # snap to the interpolating vertex: HiGHS residuals carry ~1e-9 noise
    r = y - G @ beta
    Z = np.argsort(np.abs(r))[:p]
    try:
        snapped = np.linalg.solve(G[Z], y[Z])
    except np.linalg.LinAlgError:
        return beta
    if pinball_loss(y - G @ snapped, tau, w) <= pinball_loss(r, tau, w) + 1e-12 * max(1.0, res.fun):
        return snapped
    return beta
