"""Synthetic trial/observational pairs with a designed confounding strength.

Outcomes follow ``Y(t) = (2t - 1)(X + 1) + N`` with noise ``N = V + eps``,
``V ~ Unif(0, 1)`` and ``eps ~ Normal(0, sigma2_y)``.  The observational
treatment is drawn from a full propensity that sits on the boundary of the
sensitivity model: ``u_b(x)`` when the hidden ``U <= t(x)`` and ``ell(x)``
otherwise.  What ``U`` is depends on the confounder mode:

* ``adversarial``: ``U = V``, the uniform part of the outcome noise.
* ``potential_outcome``: ``U = F_N(N)``, the uniform rank of the full noise,
  which makes the design coincide with the worst case.
* ``independent``: ``U`` independent of the outcomes (confounding that
  leaves the observed law untouched).
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit, ndtr

from .bounds import nominal_bounds, tau_level
from .core import Dataset, DatasetKind, RngSpec, as_gamma
from .errors import ZeroVariance

RCT_RANGE = 1.0
OBS_RANGE = 2.0


class ConfounderMode(str, enum.Enum):
    ADVERSARIAL = "adversarial"
    POTENTIAL_OUTCOME = "potential_outcome"
    INDEPENDENT = "independent"


def marginal_propensity(x):
    """Nominal propensity sigmoid(0.75 x + 0.5)."""
    return expit(0.75 * np.asarray(x, dtype=float) + 0.5)


def design_threshold(e, gamma):
    """Mass ``t`` of the upper branch such that ``t u_b + (1 - t) ell = e``."""
    nb = nominal_bounds(e, gamma)
    if as_gamma(gamma) == 1.0:
        return np.ones_like(np.asarray(e, float)) if np.ndim(e) else 1.0
    return (np.asarray(e) - nb.ell) / (nb.u - nb.ell)


def adversarial_propensity(x, u, gamma):
    """Full propensity: ``u_b(x)`` if ``u <= t(x)`` else ``ell(x)``; ``e(x)`` when gamma is 1."""
    gamma = as_gamma(gamma)
    e = marginal_propensity(x)
    if gamma == 1.0:
        return e
    nb = nominal_bounds(e, gamma)
    t = design_threshold(e, gamma)
    return np.where(np.asarray(u) <= t, nb.u, nb.ell)


@dataclass(frozen=True)
class SyntheticSpec:
    gamma_star: float = 5.0
    n_rct: int = 2000
    n_obs: int = 2000
    sigma2_y: float = 0.1
    pi: float = 0.5
    seed: int = 0
    mode: ConfounderMode = ConfounderMode.ADVERSARIAL

    def __post_init__(self):
        as_gamma(self.gamma_star)
        if self.n_rct < 1 or self.n_obs < 1:
            raise ValueError("sample sizes must be >= 1")
        if not self.sigma2_y >= 0:
            raise ValueError("noise variance must be >= 0")
        if not 0.0 < self.pi < 1.0:
            raise ValueError("trial assignment probability must lie in (0, 1)")
        object.__setattr__(self, "mode", ConfounderMode(self.mode))

    @property
    def rng(self) -> RngSpec:
        return RngSpec(self.seed, "synthetic")

    def to_json(self) -> dict:
        out = asdict(self)
        out["mode"] = self.mode.value
        return out


@dataclass(frozen=True)
class OracleView:
    """Hidden per-record truth for the observational sample."""

    u: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    e: np.ndarray
    e_plus: np.ndarray

    @property
    def cate(self) -> np.ndarray:
        return self.y1 - self.y0


# ---------------------------------------------------------------------------
# noise law


def _g(z):
    """Antiderivative of the standard normal CDF: z Phi(z) + phi(z)."""
    z = np.asarray(z, dtype=float)
    return z * ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def _v_eps_mass(z, a, b, sigma):
    """P(V + eps <= z, a < V <= b) for V ~ Unif(0, 1), eps ~ Normal(0, sigma^2)."""
    z = np.asarray(z, dtype=float)
    a = np.clip(a, 0.0, 1.0)
    b = np.clip(b, 0.0, 1.0)
    if sigma == 0.0:
        return np.clip(np.minimum(z, b) - a, 0.0, None) * (b > a)
    return sigma * (_g((z - a) / sigma) - _g((z - b) / sigma))


class NoiseLaw:
    def __init__(self, sigma2_y: float):
        self.sigma = math.sqrt(sigma2_y)

    def cdf(self, z):
        return np.clip(_v_eps_mass(z, 0.0, 1.0, self.sigma), 0.0, 1.0)

    def sample(self, gen: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        v = gen.uniform(0.0, 1.0, n)
        eps = gen.normal(0.0, 1.0, n) * self.sigma
        return v, v + eps


def _hidden(mode: ConfounderMode, law: NoiseLaw, v, noise, gen, n):
    if mode is ConfounderMode.ADVERSARIAL:
        return v
    if mode is ConfounderMode.POTENTIAL_OUTCOME:
        return law.cdf(noise)
    return gen.uniform(0.0, 1.0, n)


def outcomes(x, noise):
    x = np.asarray(x, float)
    return -(x + 1.0) + noise, (x + 1.0) + noise


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset, OracleView]:
    """Draw the trial and observational samples; datasets keep ``u`` as a hidden column."""
    law = NoiseLaw(spec.sigma2_y)
    gen_rct = spec.rng.child("rct").generator()
    x = gen_rct.uniform(-RCT_RANGE, RCT_RANGE, spec.n_rct)
    v, noise = law.sample(gen_rct, spec.n_rct)
    u = _hidden(spec.mode, law, v, noise, gen_rct, spec.n_rct)
    t = (gen_rct.uniform(0.0, 1.0, spec.n_rct) < spec.pi).astype(np.int64)
    y0, y1 = outcomes(x, noise)
    d_rct = Dataset(x=x.reshape(-1, 1), t=t, y=np.where(t == 1, y1, y0), kind=DatasetKind.RCT,
                    u=u.reshape(-1, 1), pi=spec.pi)

    gen_obs = spec.rng.child("obs").generator()
    x = gen_obs.uniform(-OBS_RANGE, OBS_RANGE, spec.n_obs)
    v, noise = law.sample(gen_obs, spec.n_obs)
    u = _hidden(spec.mode, law, v, noise, gen_obs, spec.n_obs)
    e = marginal_propensity(x)
    e_plus = adversarial_propensity(x, u, spec.gamma_star)
    t = (gen_obs.uniform(0.0, 1.0, spec.n_obs) < e_plus).astype(np.int64)
    y0, y1 = outcomes(x, noise)
    d_obs = Dataset(x=x.reshape(-1, 1), t=t, y=np.where(t == 1, y1, y0), kind=DatasetKind.OBS,
                    u=u.reshape(-1, 1))
    for a in (x, u, y0, y1, e, e_plus):
        a.flags.writeable = False
    return d_rct, d_obs, OracleView(u=u, y0=y0, y1=y1, e=e, e_plus=e_plus)


def correlation_uy(u, y1) -> float:
    """Pearson correlation between the hidden confounder and the treated potential outcome."""
    u = np.asarray(u, float).reshape(-1)
    y1 = np.asarray(y1, float).reshape(-1)
    if len(u) < 2 or np.ptp(u) == 0 or np.ptp(y1) == 0:
        raise ZeroVariance("correlation needs variation in both inputs")
    return float(np.corrcoef(u, y1)[0, 1])


# ---------------------------------------------------------------------------
# population oracle


class SyntheticPopulation:
    """Closed-form observed law of the observational study, for oracle computations."""

    def __init__(self, gamma_star: float, sigma2_y: float = 0.1,
                 mode: ConfounderMode | str = ConfounderMode.ADVERSARIAL):
        self.gamma_star = as_gamma(gamma_star)
        self.law = NoiseLaw(sigma2_y)
        self.mode = ConfounderMode(mode)

    def _joint_low(self, z, thr):
        """P(N <= z, U <= thr)."""
        if self.mode is ConfounderMode.ADVERSARIAL:
            return _v_eps_mass(z, 0.0, thr, self.law.sigma)
        if self.mode is ConfounderMode.POTENTIAL_OUTCOME:
            return np.minimum(self.law.cdf(z), thr)
        return self.law.cdf(z) * thr

    def observed_cdf(self, y, x, arm: int):
        """P(Y <= y | X = x, T = arm) under the observational law."""
        x = np.asarray(x, float)
        e = marginal_propensity(x)
        if self.gamma_star == 1.0:
            z = y + (x + 1.0) if arm == 0 else y - (x + 1.0)
            return self.law.cdf(z)
        nb = nominal_bounds(e, self.gamma_star)
        thr = design_threshold(e, self.gamma_star)
        z = y + (x + 1.0) if arm == 0 else y - (x + 1.0)
        low = self._joint_low(z, thr)
        high = self.law.cdf(z) - low
        if arm == 1:
            return (nb.u * low + nb.ell * high) / e
        return ((1.0 - nb.u) * low + (1.0 - nb.ell) * high) / (1.0 - e)

    def observed_quantile(self, x, arm: int, level: float, iters: int = 80):
        """Left-continuous conditional quantile by vectorised bisection."""
        x = np.asarray(x, float)
        shift = (x + 1.0) if arm == 1 else -(x + 1.0)
        spread = 10.0 * self.law.sigma + 2.0
        lo = shift - spread
        hi = shift + 1.0 + spread
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            above = self.observed_cdf(mid, x, arm) >= level
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        return hi

    def draw(self, n: int, rng: RngSpec, x_range: float = RCT_RANGE) -> dict[str, np.ndarray]:
        gen = rng.generator()
        x = gen.uniform(-x_range, x_range, n)
        v, noise = self.law.sample(gen, n)
        u = _hidden(self.mode, self.law, v, noise, gen, n)
        y0, y1 = outcomes(x, noise)
        return {"x": x, "y0": y0, "y1": y1, "e": marginal_propensity(x),
                "e_plus": adversarial_propensity(x, u, self.gamma_star)}

    def quantile_table(self, level: float, arm: int, x_range: float = RCT_RANGE, points: int = 401):
        grid = np.linspace(-x_range, x_range, points)
        return grid, self.observed_quantile(grid, arm, level)

    def bound_terms(self, draws: dict[str, np.ndarray], gamma: float, x_range: float = RCT_RANGE):
        """Per-draw contributions to the sharp (lower, upper) ATE bounds minus the true CATE.

        Each observed arm is integrated out analytically given (X, U, noise),
        i.e. a Rao-Blackwellised estimator of the population bound under
        worst-case propensities thresholded at the observed conditional
        quantiles.
        """
        gamma = as_gamma(gamma)
        tau = tau_level(gamma)
        x, y0, y1, e, ep = draws["x"], draws["y0"], draws["y1"], draws["e"], draws["e_plus"]
        nb = nominal_bounds(e, gamma)

        def q(level, arm):
            grid, vals = self.quantile_table(level, arm, x_range)
            return np.interp(x, grid, vals)

        cate = y1 - y0
        # upper: treated high outcomes get ell, control low outcomes get u_b
        e1 = np.where(y1 > q(tau, 1), nb.ell, nb.u)
        e0 = np.where(y0 > q(1.0 - tau, 0), nb.ell, nb.u)
        upper = ep * y1 / e1 - (1.0 - ep) * y0 / (1.0 - e0) - cate
        # lower: mirror by symmetry
        e1 = np.where(y1 > q(1.0 - tau, 1), nb.u, nb.ell)
        e0 = np.where(y0 > q(tau, 0), nb.u, nb.ell)
        lower = ep * y1 / e1 - (1.0 - ep) * y0 / (1.0 - e0) - cate
        return lower, upper
