"""Semi-synthetic observational studies carved out of a randomized trial by
rejection sampling, plus nested-design importance weights."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np

from .bounds import nominal_bounds
from .core import Bounds, Dataset, DatasetKind, RngSpec, as_gamma, support_mask
from .errors import DegenerateQuantile, EmptyResult, MissingStudyIndicator, SchemaError, SingleStudy
from .nuisance import DEFAULT_LAMBDA, PropensityModel, _design, fit_logistic
from .quantreg import weighted_quantile


class ConfounderKind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"


@dataclass(frozen=True)
class SubsampleSpec:
    gamma_true: float
    confounder: str
    kind: ConfounderKind = ConfounderKind.CONTINUOUS
    sign: str = "pos"
    rng: RngSpec = field(default_factory=lambda: RngSpec(0, "subsample"))
    until_stable: bool = False

    def __post_init__(self):
        as_gamma(self.gamma_true)
        object.__setattr__(self, "kind", ConfounderKind(self.kind))
        if self.sign not in ("pos", "neg"):
            raise ValueError("sign must be 'pos' or 'neg'")


def lower_branch_mass(pi_hat: float, gamma: float) -> float:
    """Share of units that must get the low propensity so the marginal stays ``pi_hat``."""
    nb = nominal_bounds(pi_hat, gamma)
    if nb.u == nb.ell:
        return 0.0
    return (nb.u - pi_hat) / (nb.u - nb.ell)


@dataclass(frozen=True)
class Design:
    pi_hat: float
    ell: float
    u: float
    q_star: float
    threshold: float | None

    def propensity(self, conf: np.ndarray, kind: ConfounderKind, sign: str) -> np.ndarray:
        conf = np.asarray(conf, float)
        if self.u == self.ell:
            return np.full(conf.shape, self.pi_hat)
        if kind is ConfounderKind.BINARY:
            low = conf == 1 if sign == "pos" else conf == 0
        else:
            z = conf if sign == "pos" else -conf
            low = z > self.threshold
        return np.where(low, self.ell, self.u)


def make_design(conf: np.ndarray, pi_hat: float, gamma: float, kind: ConfounderKind, sign: str) -> Design:
    """Nominal bounds around ``pi_hat`` and the confounder threshold.

    For a continuous confounder the low-propensity branch is everything
    strictly above the empirical quantile at ``1 - q*``; ties go to the
    high branch.  A negative sign applies the same rule to ``-U``.
    """
    nb = nominal_bounds(pi_hat, gamma)
    q = lower_branch_mass(pi_hat, gamma)
    thr = None
    if kind is ConfounderKind.CONTINUOUS:
        conf = np.asarray(conf, float)
        if np.ptp(conf) == 0:
            raise DegenerateQuantile("the confounder is constant")
        z = conf if sign == "pos" else -conf
        thr = weighted_quantile(z, np.ones_like(z), 1.0 - q)
    return Design(float(pi_hat), float(nb.ell), float(nb.u), float(q), thr)


def designed_propensity(spec: SubsampleSpec, pi_hat: float, conf: np.ndarray, reference: np.ndarray | None = None) -> np.ndarray:
    """Full propensity per record; the threshold comes from ``reference`` (default ``conf``)."""
    ref = conf if reference is None else reference
    design = make_design(ref, pi_hat, spec.gamma_true, spec.kind, spec.sign)
    return design.propensity(conf, spec.kind, spec.sign)


@dataclass
class SubsampleAudit:
    pi_hat: float
    pi_hat_before_balancing: float
    ell: float
    u: float
    q_star: float
    threshold: float | None
    m_constant: float
    passes: int
    n_input: int
    n_balanced: int
    n_output: int
    odds_ratios: list[float] = field(default_factory=list)

    @property
    def survival_fraction(self) -> float:
        return self.n_output / self.n_input

    def to_json(self) -> dict:
        out = asdict(self)
        out["survival_fraction"] = self.survival_fraction
        return out


def _confounder_column(d: Dataset, name: str) -> np.ndarray:
    if name in d.u_names:
        return d.u[:, d.u_names.index(name)]
    if name in d.x_names:
        return d.x[:, d.x_names.index(name)]
    raise SchemaError(f"confounder column {name!r} not found")


def _balance_binary(conf, target, gen) -> np.ndarray:
    """Indices of a uniform down-sample whose share of ones equals ``target``."""
    ones = np.flatnonzero(conf == 1)
    zeros = np.flatnonzero(conf == 0)
    if len(ones) + len(zeros) != len(conf):
        raise SchemaError("binary confounder must take values in {0, 1}")
    if target <= 0.0:
        return np.sort(zeros)
    if target >= 1.0:
        return np.sort(ones)
    # keep as many records as possible
    n_keep_ones = min(len(ones), int(np.floor(target / (1 - target) * len(zeros))))
    n_keep_zeros = min(len(zeros), int(np.floor((1 - target) / target * n_keep_ones)))
    keep = np.concatenate([gen.choice(ones, n_keep_ones, replace=False),
                           gen.choice(zeros, n_keep_zeros, replace=False)])
    return np.sort(keep)


def rejection_subsample(d: Dataset, spec: SubsampleSpec) -> tuple[Dataset, SubsampleAudit]:
    """Rejection-sample a trial into a confounded observational study.

    Each record is kept with probability P_conf(T = t_i | U_i) / (pi_hat(t_i) M).
    By default one pass is made; ``until_stable`` repeats passes with the
    same M until one discards nothing.  The confounder is removed from the
    output.
    """
    gen = spec.rng.generator()
    conf_all = _confounder_column(d, spec.confounder)
    pi_before = float(np.mean(d.t))
    gamma = as_gamma(spec.gamma_true)
    idx = np.arange(d.n)
    if spec.kind is ConfounderKind.BINARY:
        q = lower_branch_mass(pi_before, gamma)
        target = q if spec.sign == "pos" else 1.0 - q
        idx = _balance_binary(conf_all, target, gen)
        if len(idx) == 0:
            raise EmptyResult("binary pre-balancing removed every record")
    n_balanced = len(idx)
    t = d.t[idx]
    conf = conf_all[idx]
    pi_hat = float(np.mean(t))
    design = make_design(conf, pi_hat, gamma, spec.kind, spec.sign)
    e_plus = design.propensity(conf, spec.kind, spec.sign)
    p_conf = np.where(t == 1, e_plus, 1.0 - e_plus)
    pi_t = np.where(t == 1, pi_hat, 1.0 - pi_hat)
    m_const = float(np.max(p_conf) / min(pi_hat, 1.0 - pi_hat))
    ratio = p_conf / (pi_t * m_const)

    alive = np.ones(len(idx), dtype=bool)
    passes = 0
    while True:
        passes += 1
        k = gen.uniform(0.0, 1.0, len(idx))
        drop = alive & (k > ratio)
        alive &= ~drop
        if not spec.until_stable or not drop.any() or not alive.any() or passes >= len(idx):
            break
    if not alive.any():
        raise EmptyResult("rejection sampling discarded every record")
    keep = idx[alive]
    cols = [j for j, name in enumerate(d.x_names) if name != spec.confounder]
    out = Dataset(x=d.x[keep][:, cols], t=d.t[keep], y=d.y[keep], kind=DatasetKind.OBS,
                  x_names=tuple(d.x_names[j] for j in cols))
    e_kept = e_plus[alive]
    odds = (e_kept / (1 - e_kept)) / (pi_hat / (1 - pi_hat))
    audit = SubsampleAudit(
        pi_hat=pi_hat, pi_hat_before_balancing=pi_before, ell=design.ell, u=design.u,
        q_star=design.q_star, threshold=design.threshold, m_constant=m_const, passes=passes,
        n_input=d.n, n_balanced=n_balanced, n_output=len(keep),
        odds_ratios=sorted({float(v) for v in np.round(odds, 12)}),
    )
    return out, audit


# ---------------------------------------------------------------------------
# nested design weights


@dataclass(frozen=True)
class NestedWeights:
    w: np.ndarray
    membership: PropensityModel
    support_ratio: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        p = self.membership.predict(x)
        return (1.0 - p) / p * self.support_ratio


def estimate_nested_weights(pooled: Dataset, support: Bounds | None = None, lam: float = DEFAULT_LAMBDA) -> NestedWeights:
    """Importance weights w(x) = odds(S=0 | x) * odds(S=1 | X in support).

    ``w`` is evaluated on every pooled record; apply it to trial records
    to reweight the trial toward the restricted observational population.
    """
    if pooled.s is None:
        raise MissingStudyIndicator("pooled dataset has no study indicator")
    s = pooled.s.astype(float)
    if np.all(s == s[0]):
        raise SingleStudy("membership model needs records from both studies")
    beta = fit_logistic(_design(pooled.x), s, lam)
    model = PropensityModel(beta, lam)
    inside = support_mask(pooled, support) if support is not None else np.ones(pooled.n, bool)
    share = float(np.mean(s[inside]))
    if share in (0.0, 1.0):
        raise SingleStudy("support region holds records from one study only")
    ratio = share / (1.0 - share)
    p = model.predict(pooled.x)
    w = (1.0 - p) / p * ratio
    w.flags.writeable = False
    return NestedWeights(w, model, ratio)

